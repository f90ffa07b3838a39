"""Transfer protocols: linear probing, end-to-end fine-tuning and
domain-adaptive pre-training chains.

A probe trains a single linear map (Adam, fixed learning rate 1e-3, 100
epochs, batch 100, no augmentation) on frozen backbone features.
Fine-tuning replaces the classification head and optimizes every parameter
with the fine-tune schedule and training-time augmentation.  Domain-adaptive
chains take a generically pre-trained checkpoint, fine-tune it on an
in-domain dataset, strip the head and hand the backbone on as a new source
checkpoint.

One dataset may never appear as both source and target of an experiment:
every entry point checks the target id against the checkpoint lineage.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .augment import (
    PipelineMode,
    TransformPipeline,
    protocol_eval_pipeline,
    protocol_train_pipeline,
)
from .manifest import DatasetManifest, LabelMode, ManifestRegistry, SplitRole, SplitSpec, stratified_split
from .metrics import BootstrapSpec, MetricReport, PredictionRecord, accuracy, bootstrap_ci, f1_multilabel
from .models import (
    Checkpoint,
    CheckpointStore,
    ClassifierModel,
    HeadSpec,
    ModelLineage,
    OutputMode,
    StageKind,
    model_from_checkpoint,
    replace_head,
)
from .imageio import ImageSource
from .seeding import derive_rng, derive_seed
from .training import (
    LossMode,
    ScheduleSpec,
    _batch_tensors,
    extract_features,
    finetune_schedule,
    train,
)


class TransferRuleError(ValueError):
    """Raised when an experiment would reuse a dataset as source and target."""


class TransferMode(str, Enum):
    FEATURE_EXTRACTION = "feature_extraction"
    FINE_TUNE = "fine_tune"


def check_source_target_rule(lineage: ModelLineage, target_dataset_id: str) -> None:
    """A dataset in the source lineage must not reappear as the target."""
    if target_dataset_id in lineage.dataset_ids:
        raise TransferRuleError(
            f"dataset {target_dataset_id!r} appears in the source lineage "
            f"{list(lineage.dataset_ids)}; it cannot also be the target"
        )


@dataclass(frozen=True)
class TransferPlan:
    """One experiment: a source checkpoint applied to a target dataset."""

    source_checkpoint: str
    target_manifest_id: str
    mode: TransferMode
    target_split_seed: int = 0
    train_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TransferMode(self.mode))


@dataclass(frozen=True)
class ProbeSpec:
    """The fixed softmax-classifier schedule used on frozen features."""

    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 100


class LinearProbe:
    """Single linear map + bias trained on raw feature vectors."""

    def __init__(self, feature_dim: int, head_spec: HeadSpec, seed: int = 0,
                 spec: ProbeSpec = ProbeSpec()) -> None:
        self.head_spec = head_spec
        self.spec = spec
        self.seed = seed
        self.linear = torch.nn.Linear(feature_dim, head_spec.num_classes)
        # The probe objective is convex; zero init is deterministic and
        # avoids drowning small feature signals in init noise.
        with torch.no_grad():
            self.linear.weight.zero_()
            self.linear.bias.zero_()

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.linear.parameters())

    def fit(self, features: np.ndarray, labels: np.ndarray) -> "LinearProbe":
        x = torch.as_tensor(features, dtype=torch.float32)
        if labels.ndim == 1:
            hot = np.zeros((len(labels), self.head_spec.num_classes), dtype=np.float32)
            hot[np.arange(len(labels)), labels.astype(int)] = 1.0
            labels = hot
        y_hot = torch.as_tensor(labels, dtype=torch.float32)
        if len(x) != len(y_hot):
            raise ValueError(f"{len(x)} feature rows vs {len(y_hot)} label rows")
        y_idx = y_hot.argmax(dim=1)

        exclusive = self.head_spec.output_mode is OutputMode.EXCLUSIVE
        optimizer = torch.optim.Adam(self.linear.parameters(), lr=self.spec.lr)
        n = len(x)
        self.linear.train()
        for epoch in range(self.spec.epochs):
            order = derive_rng("probe_order", self.seed, epoch).permutation(n)
            for start in range(0, n, self.spec.batch_size):
                idx = torch.as_tensor(order[start : start + self.spec.batch_size].copy())
                logits = self.linear(x[idx])
                if exclusive:
                    loss = torch.nn.functional.cross_entropy(logits, y_idx[idx])
                else:
                    loss = torch.nn.functional.binary_cross_entropy_with_logits(
                        logits, y_hot[idx]
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
        self.linear.eval()
        return self

    def predict_scores(self, features: np.ndarray) -> np.ndarray:
        """Class probabilities (softmax or per-class sigmoid) per feature row."""
        with torch.no_grad():
            logits = self.linear(torch.as_tensor(features, dtype=torch.float32))
            if self.head_spec.output_mode is OutputMode.EXCLUSIVE:
                return torch.softmax(logits, dim=1).numpy()
            return torch.sigmoid(logits).numpy()


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    head: HeadSpec,
    seed: int = 0,
    heldout_features: np.ndarray | None = None,
    spec: ProbeSpec = ProbeSpec(),
) -> tuple[LinearProbe, np.ndarray | None]:
    """Train a probe on (features, labels); optionally score held-out rows."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature rows vs {len(labels)} label rows")
    probe = LinearProbe(features.shape[1], head, seed=seed, spec=spec).fit(features, labels)
    scores = probe.predict_scores(heldout_features) if heldout_features is not None else None
    return probe, scores


# --------------------------------------------------------------------------
# Fine-tuning and domain adaptation
# --------------------------------------------------------------------------


def fine_tune(
    checkpoint: Checkpoint,
    target_train: DatasetManifest,
    head: HeadSpec,
    schedule: ScheduleSpec | None = None,
    seed: int = 0,
    pipeline: TransformPipeline | None = None,
    data_root: str | Path | None = None,
    cache_images: bool = False,
) -> ClassifierModel:
    """Replace the head and optimize the whole network on the target train set."""
    check_source_target_rule(checkpoint.lineage, target_train.dataset_id)
    schedule = schedule if schedule is not None else finetune_schedule()
    pipeline = pipeline if pipeline is not None else protocol_train_pipeline(seed)
    model = model_from_checkpoint(checkpoint, head_spec=head, seed=derive_seed("head", seed))
    replace_head(model, head, seed=derive_seed("head", seed))
    loss_mode = (
        LossMode.EXCLUSIVE_XENT
        if head.output_mode is OutputMode.EXCLUSIVE
        else LossMode.INDEPENDENT_BINARY_XENT
    )
    model, _, _ = train(
        model,
        target_train,
        schedule,
        pipeline,
        loss_mode,
        seed=seed,
        data_root=data_root,
        stage_kind=StageKind.FINETUNE,
        cache_images=cache_images,
    )
    return model


def domain_adapt(
    pretrained_checkpoint: Checkpoint,
    indomain_manifest: DatasetManifest,
    head: HeadSpec,
    schedule: ScheduleSpec | None = None,
    seed: int = 0,
    pipeline: TransformPipeline | None = None,
    data_root: str | Path | None = None,
    train_fraction_seed: int | None = None,
    cache_images: bool = False,
) -> Checkpoint:
    """Second round of supervised pre-training on an in-domain dataset.

    The checkpoint must start from a pre-training stage (e.g. an imported
    generic-domain model).  The in-domain dataset is split with the source
    preset and the 80% train portion is used; the classification head is
    stripped afterwards so the result is a pure source checkpoint.
    """
    if not pretrained_checkpoint.lineage.stages:
        raise TransferRuleError("domain adaptation requires a pre-trained checkpoint")
    if pretrained_checkpoint.lineage.stages[0].stage_kind is not StageKind.PRETRAIN:
        raise TransferRuleError(
            "domain adaptation must start from a checkpoint whose lineage begins "
            "with a pretrain stage"
        )
    if indomain_manifest.dataset_id in pretrained_checkpoint.lineage.dataset_ids:
        raise TransferRuleError(
            f"dataset {indomain_manifest.dataset_id!r} already appears in the "
            f"checkpoint lineage; refusing a second round on it"
        )
    schedule = schedule if schedule is not None else finetune_schedule()
    pipeline = pipeline if pipeline is not None else protocol_train_pipeline(seed)
    split_seed = train_fraction_seed if train_fraction_seed is not None else seed
    adapt_train, _ = stratified_split(
        indomain_manifest, SplitSpec.for_role(SplitRole.SOURCE, split_seed)
    )
    model = model_from_checkpoint(
        pretrained_checkpoint, head_spec=head, seed=derive_seed("head", seed)
    )
    replace_head(model, head, seed=derive_seed("head", seed))
    loss_mode = (
        LossMode.EXCLUSIVE_XENT
        if head.output_mode is OutputMode.EXCLUSIVE
        else LossMode.INDEPENDENT_BINARY_XENT
    )
    model, _, _ = train(
        model,
        adapt_train,
        schedule,
        pipeline,
        loss_mode,
        seed=seed,
        data_root=data_root,
        stage_kind=StageKind.DOMAIN_ADAPT,
        cache_images=cache_images,
    )
    return Checkpoint(
        architecture=model.architecture,
        backbone_state={k: v.detach().clone() for k, v in model.backbone.state_dict().items()},
        head_state=None,
        head_spec=None,
        lineage=model.lineage,
        preprocessing=model.preprocessing,
    )


# --------------------------------------------------------------------------
# End-to-end experiment
# --------------------------------------------------------------------------


def head_spec_for(manifest: DatasetManifest) -> HeadSpec:
    mode = (
        OutputMode.EXCLUSIVE
        if manifest.label_mode is LabelMode.SINGLE_LABEL
        else OutputMode.INDEPENDENT
    )
    return HeadSpec(num_classes=manifest.num_classes, output_mode=mode)


def predict_scores(
    model: ClassifierModel,
    manifest: DatasetManifest,
    pipeline: TransformPipeline,
    data_root: str | Path | None = None,
    batch_size: int = 100,
    cache_images: bool = False,
) -> np.ndarray:
    """Class probabilities for every record, rows in manifest order."""
    if pipeline.mode is not PipelineMode.EVAL:
        raise ValueError("predict_scores requires an eval-mode pipeline")
    source = ImageSource(data_root=data_root, cache=cache_images)
    model.eval()
    out = np.empty((len(manifest.records), model.head_spec.num_classes), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(manifest.records), batch_size):
            idx = np.arange(start, min(start + batch_size, len(manifest.records)))
            batch, _ = _batch_tensors(
                manifest, idx, source, pipeline, None, LossMode.INDEPENDENT_BINARY_XENT
            )
            logits = model(batch)
            if model.head_spec.output_mode is OutputMode.EXCLUSIVE:
                out[idx] = torch.softmax(logits, dim=1).numpy()
            else:
                out[idx] = torch.sigmoid(logits).numpy()
    return out


def prediction_records(
    scores: np.ndarray, manifest: DatasetManifest
) -> list[PredictionRecord]:
    return [
        PredictionRecord(
            scores=tuple(float(s) for s in scores[i]),
            true_labels=rec.labels,
            example_id=rec.image_ref,
        )
        for i, rec in enumerate(manifest.records)
    ]


def run_transfer_experiment(
    plan: TransferPlan,
    registry: ManifestRegistry,
    zoo: CheckpointStore,
    schedule: ScheduleSpec | None = None,
    train_pipeline: TransformPipeline | None = None,
    eval_pipeline: TransformPipeline | None = None,
    probe_spec: ProbeSpec = ProbeSpec(),
    bootstrap: BootstrapSpec | None = None,
    ledger=None,
    data_root: str | Path | None = None,
    cache_images: bool = False,
) -> MetricReport:
    """Execute one transfer experiment end to end.

    Splits the target 20/80, runs the requested protocol, evaluates on the
    80% test portion with a bootstrap CI and, when a run ledger is supplied,
    persists the config hash, lineage, seeds and report.
    """
    checkpoint = zoo.get(plan.source_checkpoint)
    check_source_target_rule(checkpoint.lineage, plan.target_manifest_id)

    target = registry.get(plan.target_manifest_id)
    target_train, target_test = stratified_split(
        target, SplitSpec.for_role(SplitRole.TARGET, plan.target_split_seed)
    )
    head = head_spec_for(target)
    eval_pipe = eval_pipeline if eval_pipeline is not None else protocol_eval_pipeline()

    if plan.mode is TransferMode.FEATURE_EXTRACTION:
        model = model_from_checkpoint(checkpoint, head_spec=head)
        train_x, train_y = extract_features(
            model, target_train, eval_pipe, data_root=data_root, cache_images=cache_images
        )
        test_x, _ = extract_features(
            model, target_test, eval_pipe, data_root=data_root, cache_images=cache_images
        )
        _, scores = linear_probe(
            train_x, train_y, head, seed=plan.train_seed,
            heldout_features=test_x, spec=probe_spec,
        )
        lineage = checkpoint.lineage
    else:
        model = fine_tune(
            checkpoint,
            target_train,
            head,
            schedule=schedule,
            seed=plan.train_seed,
            pipeline=train_pipeline,
            data_root=data_root,
            cache_images=cache_images,
        )
        scores = predict_scores(
            model, target_test, eval_pipe, data_root=data_root, cache_images=cache_images
        )
        lineage = model.lineage

    records = prediction_records(scores, target_test)
    metric_fn = accuracy if target.label_mode is LabelMode.SINGLE_LABEL else f1_multilabel
    spec = bootstrap if bootstrap is not None else BootstrapSpec(seed=plan.train_seed)
    report = bootstrap_ci(records, metric_fn, spec)

    if ledger is not None:
        if plan.mode is TransferMode.FINE_TUNE:
            schedule_echo = schedule.to_dict() if schedule is not None else "finetune_preset"
        else:
            schedule_echo = None
        ledger.append_run(
            config={
                "source_checkpoint": str(plan.source_checkpoint),
                "target_manifest_id": plan.target_manifest_id,
                "mode": plan.mode.value,
                "seeds": {
                    "split": plan.target_split_seed,
                    "train": plan.train_seed,
                    "bootstrap": spec.seed,
                },
                "schedule": schedule_echo,
            },
            lineage=lineage.to_list(),
            report=report,
        )
    return report
