import numpy as np
import pytest
import torch

from rsxfer import (
    Architecture,
    BackboneSpec,
    CheckpointStore,
    HeadSpec,
    LineageStage,
    ManifestRegistry,
    ModelLineage,
    Objective,
    OutputMode,
    PipelineMode,
    ScheduleSpec,
    StageKind,
    TransferMode,
    TransferPlan,
    TransferRuleError,
    TransformPipeline,
    build_model,
    check_source_target_rule,
    checkpoint_from_model,
    domain_adapt,
    fine_tune,
    linear_probe,
    run_transfer_experiment,
    save_checkpoint,
    state_checksum,
)
from rsxfer.transfer import LinearProbe
from conftest import build_brightness_dataset


def toy_model(num_classes=2, seed=0):
    return build_model(
        BackboneSpec(architecture_id=Architecture.TOY_CONV),
        HeadSpec(num_classes=num_classes, output_mode=OutputMode.EXCLUSIVE),
        seed=seed,
    )


def small_schedule(**overrides):
    defaults = dict(
        peak_lr=3e-4, total_epochs=4, batch_size=8, warmup_epochs=1, decay_epochs=(3,)
    )
    defaults.update(overrides)
    return ScheduleSpec(**defaults)


def small_train_pipeline(seed=0):
    return TransformPipeline(mode=PipelineMode.TRAIN, resize_edge=18, crop_edge=16, seed=seed)


def small_eval_pipeline():
    return TransformPipeline(mode=PipelineMode.EVAL, resize_edge=18, crop_edge=16)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared toy datasets plus a pre-trained source checkpoint."""
    root = tmp_path_factory.mktemp("transfer")
    source = build_brightness_dataset(root, dataset_id="srcdata", n_per_class=10, seed=1)
    target = build_brightness_dataset(root, dataset_id="tgtdata", n_per_class=15, seed=2)
    ckpt_model = toy_model(seed=4)
    ckpt_model.lineage = ModelLineage(
        stages=(LineageStage("srcdata", Objective.SUPERVISED, StageKind.PRETRAIN),)
    )
    ckpt_path = save_checkpoint(ckpt_model, root / "source.ckpt", include_head=False)
    return {"root": root, "source": source, "target": target, "ckpt": ckpt_path}


class TestSourceTargetRule:
    def test_clean_lineage_passes(self):
        lineage = ModelLineage(
            stages=(LineageStage("a", Objective.SUPERVISED, StageKind.PRETRAIN),)
        )
        check_source_target_rule(lineage, "b")

    def test_violation_raises(self):
        lineage = ModelLineage(
            stages=(
                LineageStage("imagenet1k", Objective.SUPERVISED, StageKind.PRETRAIN),
                LineageStage("mlrsnet", Objective.SUPERVISED, StageKind.DOMAIN_ADAPT),
            )
        )
        with pytest.raises(TransferRuleError, match="mlrsnet"):
            check_source_target_rule(lineage, "mlrsnet")


class TestLinearProbe:
    def test_parameter_count_2048_by_21(self):
        probe = LinearProbe(2048, HeadSpec(num_classes=21, output_mode=OutputMode.EXCLUSIVE))
        assert probe.parameter_count == 2048 * 21 + 21  # 43,029

    def test_one_hot_features_reach_training_accuracy_one(self):
        rng = np.random.default_rng(0)
        n_per, c = 12, 3
        features = np.repeat(np.eye(c, dtype=np.float32), n_per, axis=0)
        labels = np.repeat(np.arange(c), n_per)
        order = rng.permutation(len(labels))
        probe, _ = linear_probe(
            features[order], labels[order],
            HeadSpec(num_classes=c, output_mode=OutputMode.EXCLUSIVE), seed=0,
        )
        predictions = probe.predict_scores(features).argmax(axis=1)
        assert (predictions == labels).all()

    def test_probability_outputs(self):
        rng = np.random.default_rng(3)
        x = rng.random((10, 5)).astype(np.float32)
        y = rng.integers(0, 4, size=10)
        probe, scores = linear_probe(
            x, y, HeadSpec(num_classes=4, output_mode=OutputMode.EXCLUSIVE),
            heldout_features=x,
        )
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, rtol=1e-5)
        sig_probe, sig_scores = linear_probe(
            x, np.eye(4, dtype=np.float32)[y],
            HeadSpec(num_classes=4, output_mode=OutputMode.INDEPENDENT),
            heldout_features=x,
        )
        assert ((sig_scores > 0) & (sig_scores < 1)).all()

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="rows"):
            linear_probe(
                np.zeros((4, 8), dtype=np.float32),
                np.zeros(5),
                HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
            )

    def test_seeded_determinism(self):
        rng = np.random.default_rng(5)
        x = rng.random((30, 6)).astype(np.float32)
        y = rng.integers(0, 3, size=30)
        spec = HeadSpec(num_classes=3, output_mode=OutputMode.EXCLUSIVE)
        a, _ = linear_probe(x, y, spec, seed=9)
        b, _ = linear_probe(x, y, spec, seed=9)
        assert torch.equal(a.linear.weight, b.linear.weight)


class TestFineTune:
    def test_lineage_appends_finetune_stage(self, workspace):
        store = CheckpointStore()
        ckpt = store.get(workspace["ckpt"])
        model = fine_tune(
            ckpt, workspace["target"],
            HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
            schedule=small_schedule(), seed=0,
            pipeline=small_train_pipeline(), data_root=workspace["root"],
            cache_images=True,
        )
        kinds = [s.stage_kind for s in model.lineage.stages]
        assert kinds == [StageKind.PRETRAIN, StageKind.FINETUNE]
        assert model.lineage.dataset_ids == ("srcdata", "tgtdata")

    def test_head_width_follows_target(self, workspace):
        store = CheckpointStore()
        ckpt = store.get(workspace["ckpt"])
        model = fine_tune(
            ckpt, workspace["target"],
            HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
            schedule=small_schedule(), seed=0,
            pipeline=small_train_pipeline(), data_root=workspace["root"],
            cache_images=True,
        )
        assert model.head.out_features == 2

    def test_source_equals_target_rejected(self, workspace):
        store = CheckpointStore()
        ckpt = store.get(workspace["ckpt"])
        renamed = workspace["target"].replace(dataset_id="srcdata")
        with pytest.raises(TransferRuleError, match="srcdata"):
            fine_tune(
                ckpt, renamed, HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
                schedule=small_schedule(), seed=0,
                pipeline=small_train_pipeline(), data_root=workspace["root"],
            )


class TestDomainAdapt:
    def test_chain_lineage_and_head_stripping(self, workspace):
        store = CheckpointStore()
        ckpt = store.get(workspace["ckpt"])
        indomain = workspace["target"].replace(dataset_id="indomain")
        adapted = domain_adapt(
            ckpt, indomain, HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
            schedule=small_schedule(), seed=0,
            pipeline=small_train_pipeline(), data_root=workspace["root"],
            cache_images=True,
        )
        assert adapted.head_state is None and adapted.head_spec is None
        assert [s.stage_kind for s in adapted.lineage.stages] == [
            StageKind.PRETRAIN, StageKind.DOMAIN_ADAPT,
        ]
        assert adapted.lineage.dataset_ids == ("srcdata", "indomain")

    def test_second_round_on_same_dataset_rejected(self, workspace):
        store = CheckpointStore()
        ckpt = store.get(workspace["ckpt"])
        indomain = workspace["target"].replace(dataset_id="indomain")
        adapted = domain_adapt(
            ckpt, indomain, HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
            schedule=small_schedule(), seed=0,
            pipeline=small_train_pipeline(), data_root=workspace["root"],
            cache_images=True,
        )
        with pytest.raises(TransferRuleError, match="already appears"):
            domain_adapt(
                adapted, indomain, HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
                schedule=small_schedule(), seed=1,
                pipeline=small_train_pipeline(), data_root=workspace["root"],
            )

    def test_requires_pretrained_start(self, workspace):
        fresh = checkpoint_from_model(toy_model(), include_head=False)
        with pytest.raises(TransferRuleError, match="pre-trained"):
            domain_adapt(
                fresh, workspace["target"],
                HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
                schedule=small_schedule(), data_root=workspace["root"],
            )


class TestRunTransferExperiment:
    def make_plan(self, workspace, mode, split_seed=0, train_seed=0):
        return TransferPlan(
            source_checkpoint=str(workspace["ckpt"]),
            target_manifest_id="tgtdata",
            mode=mode,
            target_split_seed=split_seed,
            train_seed=train_seed,
        )

    def registry_for(self, workspace):
        registry = ManifestRegistry()
        registry.register(workspace["target"])
        return registry

    def test_fe_separable_target_perfect_report(self, workspace):
        report = run_transfer_experiment(
            self.make_plan(workspace, TransferMode.FEATURE_EXTRACTION),
            self.registry_for(workspace),
            CheckpointStore(),
            eval_pipeline=small_eval_pipeline(),
            data_root=workspace["root"],
            cache_images=True,
        )
        assert (report.point, report.ci_low, report.ci_high) == (1.0, 1.0, 1.0)
        assert report.metric == "accuracy"
        assert report.n_test == 24  # 15/class target, 20% split -> 3 train, 12 test per class

    def test_fe_leaves_backbone_untouched(self, workspace):
        store = CheckpointStore()
        ckpt_before = store.get(workspace["ckpt"])
        snapshot = {k: v.clone() for k, v in ckpt_before.backbone_state.items()}
        run_transfer_experiment(
            self.make_plan(workspace, TransferMode.FEATURE_EXTRACTION),
            self.registry_for(workspace),
            store,
            eval_pipeline=small_eval_pipeline(),
            data_root=workspace["root"],
            cache_images=True,
        )
        ckpt_after = store.get(workspace["ckpt"])
        assert all(torch.equal(snapshot[k], ckpt_after.backbone_state[k]) for k in snapshot)

    def test_ft_changes_backbone(self, workspace):
        store = CheckpointStore()
        before = store.get(workspace["ckpt"])
        model = fine_tune(
            before, workspace["target"],
            HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
            schedule=small_schedule(total_epochs=1, warmup_epochs=0, decay_epochs=()),
            seed=0, pipeline=small_train_pipeline(), data_root=workspace["root"],
            cache_images=True,
        )
        rebuilt = build_model(
            BackboneSpec(architecture_id=Architecture.TOY_CONV),
            HeadSpec(num_classes=2, output_mode=OutputMode.EXCLUSIVE),
        )
        rebuilt.backbone.load_state_dict(before.backbone_state)
        assert state_checksum(model.backbone) != state_checksum(rebuilt.backbone)

    def test_probe_determinism_identical_reports(self, workspace):
        reports = [
            run_transfer_experiment(
                self.make_plan(workspace, TransferMode.FEATURE_EXTRACTION, 3, 5),
                self.registry_for(workspace),
                CheckpointStore(),
                eval_pipeline=small_eval_pipeline(),
                data_root=workspace["root"],
                cache_images=True,
            )
            for _ in range(2)
        ]
        assert reports[0] == reports[1]

    def test_plan_with_lineage_violation_rejected(self, workspace):
        plan = TransferPlan(
            source_checkpoint=str(workspace["ckpt"]),
            target_manifest_id="srcdata",
            mode=TransferMode.FEATURE_EXTRACTION,
        )
        registry = ManifestRegistry()
        registry.register(workspace["source"])
        with pytest.raises(TransferRuleError, match="srcdata"):
            run_transfer_experiment(
                plan, registry, CheckpointStore(),
                eval_pipeline=small_eval_pipeline(), data_root=workspace["root"],
            )

    def test_ft_mode_end_to_end_lineage_grows_by_one(self, workspace, tmp_path):
        from rsxfer import RunLedger

        ledger = RunLedger(tmp_path / "runs.jsonl")
        report = run_transfer_experiment(
            self.make_plan(workspace, TransferMode.FINE_TUNE),
            self.registry_for(workspace),
            CheckpointStore(),
            schedule=small_schedule(),
            train_pipeline=small_train_pipeline(seed=1),
            eval_pipeline=small_eval_pipeline(),
            ledger=ledger,
            data_root=workspace["root"],
            cache_images=True,
        )
        assert 0.0 <= report.point <= 1.0
        assert report.metric == "accuracy"
        (entry,) = ledger.entries()
        input_lineage = CheckpointStore().get(workspace["ckpt"]).lineage
        assert len(entry.lineage) == len(input_lineage.stages) + 1
        assert entry.lineage[-1]["stage_kind"] == "finetune"
        assert entry.report["metric"] == "accuracy"
