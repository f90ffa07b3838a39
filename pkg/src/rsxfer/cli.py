"""The ``xfer`` command line: dataset splitting/subsetting, checkpoint import,
pre-training, domain adaptation, transfer experiments, suites and reports.

Relative image refs and manifest paths resolve against --data-root or the
XFER_DATA_ROOT environment variable.  Exit codes: 0 success, 1 configuration
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .augment import PipelineMode, TransformError, TransformPipeline
from .imageio import DATA_ROOT_ENV, ImageReadError
from .ledger import ConfigError, ExperimentConfig, RunLedger, load_suite
from .manifest import (
    LabelMode,
    ManifestError,
    ManifestRegistry,
    SplitError,
    SplitRole,
    SplitSpec,
    SubsetError,
    SubsetSpec,
    build_subset,
    load_manifest,
    save_manifest,
    stratified_split,
)
from .metrics import BootstrapSpec, MetricError
from .models import (
    Architecture,
    BackboneSpec,
    CheckpointError,
    CheckpointStore,
    ModelError,
    build_model,
    import_external_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from .reporting import grid_from_entries, render_csv, render_text
from .training import (
    SCHEDULE_PRESETS,
    LossMode,
    ScheduleSpec,
    TrainingError,
    train,
)
from .transfer import (
    TransferMode,
    TransferPlan,
    TransferRuleError,
    domain_adapt,
    head_spec_for,
    run_transfer_experiment,
)

_CONFIG_ERRORS = (
    ConfigError,
    ManifestError,
    SplitError,
    SubsetError,
    ModelError,
    CheckpointError,
    TransferRuleError,
    TrainingError,
    TransformError,
    MetricError,
    FileNotFoundError,
    KeyError,
    ValueError,
)


def _data_root(args) -> str | None:
    return getattr(args, "data_root", None) or os.environ.get(DATA_ROOT_ENV)


def _schedule_from_args(args, default_preset: str) -> ScheduleSpec:
    overrides = {}
    for name in ("total_epochs", "batch_size", "warmup_epochs", "decay_factor", "peak_lr"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "decay_epochs", None) is not None:
        overrides["decay_epochs"] = tuple(
            int(tok) for tok in args.decay_epochs.split(",") if tok.strip()
        )
    preset = getattr(args, "schedule", None) or default_preset
    return SCHEDULE_PRESETS[preset](**overrides)


def _schedule_from_config(value) -> ScheduleSpec:
    if isinstance(value, str):
        if value not in SCHEDULE_PRESETS:
            raise ConfigError(f"unknown schedule preset {value!r}")
        return SCHEDULE_PRESETS[value]()
    overrides = dict(value)
    preset = overrides.pop("preset", "finetune")
    if preset not in SCHEDULE_PRESETS:
        raise ConfigError(f"unknown schedule preset {preset!r}")
    if "decay_epochs" in overrides:
        overrides["decay_epochs"] = tuple(overrides["decay_epochs"])
    return SCHEDULE_PRESETS[preset](**overrides)


def _train_pipeline_from_args(args, seed: int) -> TransformPipeline:
    return TransformPipeline(
        mode=PipelineMode.TRAIN,
        resize_edge=getattr(args, "resize_edge", None) or 292,
        crop_edge=getattr(args, "crop_edge", None) or 256,
        seed=seed,
    )


def _eval_pipeline_from_args(args) -> TransformPipeline:
    return TransformPipeline(
        mode=PipelineMode.EVAL,
        resize_edge=getattr(args, "resize_edge", None) or 292,
        crop_edge=getattr(args, "crop_edge", None) or 256,
    )


def _add_schedule_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--total-epochs", dest="total_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    parser.add_argument("--decay-epochs", dest="decay_epochs", help="comma list, e.g. 50,70,90")
    parser.add_argument("--decay-factor", dest="decay_factor", type=float)
    parser.add_argument("--peak-lr", dest="peak_lr", type=float)


def _add_pipeline_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--resize-edge", dest="resize_edge", type=int)
    parser.add_argument("--crop-edge", dest="crop_edge", type=int)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.train_fraction is not None:
        spec = SplitSpec(
            train_fraction=args.train_fraction, seed=args.seed, role=SplitRole(args.role)
        )
    else:
        spec = SplitSpec.for_role(args.role, args.seed)
    train_part, test_part = stratified_split(manifest, spec)
    out = Path(args.out)
    train_path = save_manifest(train_part, out / f"{manifest.dataset_id}.train.manifest")
    test_path = save_manifest(test_part, out / f"{manifest.dataset_id}.test.manifest")
    print(f"train: {train_path} ({len(train_part)} records)")
    print(f"test:  {test_path} ({len(test_part)} records)")
    return 0


def cmd_subset(args) -> int:
    manifest = load_manifest(args.manifest)
    reference: tuple[str, ...] = ()
    if args.ref_classes:
        reference = tuple(
            line.strip()
            for line in Path(args.ref_classes).read_text(encoding="utf-8").splitlines()
            if line.strip()
        )
    spec = SubsetSpec(mode=args.mode, reference_classes=reference, seed=args.seed)
    subset = build_subset(manifest, spec)
    out = Path(args.out) if args.out else Path(args.manifest).parent / f"{subset.dataset_id}.manifest"
    save_manifest(subset, out)
    print(f"{subset.dataset_id}: {len(subset)} records, {subset.num_classes} classes -> {out}")
    return 0


def cmd_import_checkpoint(args) -> int:
    out = import_external_checkpoint(args.source_kind, args.in_path, args.out)
    print(f"imported {args.source_kind} weights -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    manifest = load_manifest(args.manifest)
    head = head_spec_for(manifest)
    model = build_model(BackboneSpec(architecture_id=Architecture(args.backbone)), head, seed=args.seed)
    schedule = _schedule_from_args(args, default_preset="scratch")
    pipeline = _train_pipeline_from_args(args, seed=args.seed)
    loss_mode = (
        LossMode.EXCLUSIVE_XENT
        if manifest.label_mode is LabelMode.SINGLE_LABEL
        else LossMode.INDEPENDENT_BINARY_XENT
    )
    model, log, _ = train(
        model,
        manifest,
        schedule,
        pipeline,
        loss_mode,
        seed=args.seed,
        data_root=_data_root(args),
        cache_images=args.cache_images,
    )
    path = save_checkpoint(model, args.out, include_head=False)
    log_path = args.log or f"{args.out}.log.jsonl"
    log.write_jsonl(log_path)
    print(f"checkpoint: {path}")
    print(f"train log:  {log_path}")
    return 0


def cmd_adapt(args) -> int:
    store = CheckpointStore()
    checkpoint = store.get(args.ckpt)
    manifest = load_manifest(args.manifest)
    wanted = LabelMode.SINGLE_LABEL if args.label_mode == "single" else LabelMode.MULTI_LABEL
    if manifest.label_mode is not wanted:
        raise ConfigError(
            f"manifest {manifest.dataset_id!r} is {manifest.label_mode.value}; "
            f"--label-mode {args.label_mode} needs a matching manifest"
        )
    schedule = _schedule_from_args(args, default_preset="finetune")
    pipeline = _train_pipeline_from_args(args, seed=args.seed)
    adapted = domain_adapt(
        checkpoint,
        manifest,
        head_spec_for(manifest),
        schedule=schedule,
        seed=args.seed,
        pipeline=pipeline,
        data_root=_data_root(args),
        cache_images=args.cache_images,
    )
    path = write_checkpoint(adapted, args.out)
    chain = " > ".join(adapted.lineage.dataset_ids)
    print(f"adapted checkpoint: {path} (lineage: {chain})")
    return 0


def cmd_transfer(args) -> int:
    registry = ManifestRegistry()
    target = load_manifest(args.target)
    registry.register(target)
    plan = TransferPlan(
        source_checkpoint=str(args.ckpt),
        target_manifest_id=target.dataset_id,
        mode=TransferMode.FEATURE_EXTRACTION if args.mode == "fe" else TransferMode.FINE_TUNE,
        target_split_seed=args.split_seed,
        train_seed=args.seed,
    )
    ledger = RunLedger(args.ledger) if args.ledger else None
    schedule = (
        _schedule_from_args(args, default_preset="finetune") if args.mode == "ft" else None
    )
    report = run_transfer_experiment(
        plan,
        registry,
        CheckpointStore(),
        schedule=schedule,
        train_pipeline=_train_pipeline_from_args(args, seed=args.seed) if args.mode == "ft" else None,
        eval_pipeline=_eval_pipeline_from_args(args),
        bootstrap=BootstrapSpec(seed=args.bootstrap_seed if args.bootstrap_seed is not None else args.seed),
        ledger=ledger,
        data_root=_data_root(args),
        cache_images=args.cache_images,
    )
    print(f"{target.dataset_id} [{args.mode}] {report.metric}: {report.format_percent()}")
    return 0


def cmd_run_suite(args) -> int:
    configs = load_suite(args.suite)
    ledger = RunLedger(args.ledger)
    completed = ledger.completed_hashes()
    registry = ManifestRegistry()
    zoo = CheckpointStore(base_dir=_data_root(args))
    failures = 0
    for config in configs:
        if not args.force and config.hash in completed:
            print(f"[skip] {config.experiment_id}: already completed ({config.hash[:12]})")
            continue
        try:
            report = _execute_config(config, registry, zoo, ledger, args)
            print(f"[ok]   {config.experiment_id}: {report.format_percent()}")
        except _CONFIG_ERRORS as exc:
            failures += 1
            print(f"[fail] {config.experiment_id}: {exc}")
    return 1 if failures else 0


def _execute_config(
    config: ExperimentConfig,
    registry: ManifestRegistry,
    zoo: CheckpointStore,
    ledger: RunLedger,
    args,
) -> "MetricReport":
    root = _data_root(args)
    manifest_path = Path(config.target_manifest)
    if not manifest_path.is_absolute() and root:
        manifest_path = Path(root) / manifest_path
    target = load_manifest(manifest_path)
    registry.register(target)

    pipeline_conf = dict(config.pipeline or {})
    resize = int(pipeline_conf.get("resize_edge", 292))
    crop = int(pipeline_conf.get("crop_edge", 256))
    seeds = config.seeds
    plan = TransferPlan(
        source_checkpoint=config.source_checkpoint,
        target_manifest_id=target.dataset_id,
        mode=TransferMode.FEATURE_EXTRACTION if config.mode == "fe" else TransferMode.FINE_TUNE,
        target_split_seed=int(seeds["split"]),
        train_seed=int(seeds["train"]),
    )
    schedule = _schedule_from_config(config.schedule) if config.mode == "ft" else None
    return run_transfer_experiment(
        plan,
        registry,
        zoo,
        schedule=schedule,
        train_pipeline=TransformPipeline(
            mode=PipelineMode.TRAIN, resize_edge=resize, crop_edge=crop, seed=int(seeds["train"])
        )
        if config.mode == "ft"
        else None,
        eval_pipeline=TransformPipeline(mode=PipelineMode.EVAL, resize_edge=resize, crop_edge=crop),
        bootstrap=BootstrapSpec(seed=int(seeds["bootstrap"])),
        ledger=_LedgerWithConfig(ledger, config),
        data_root=root,
        cache_images=args.cache_images,
    )


class _LedgerWithConfig:
    """Record suite entries under the suite config's hash rather than the
    runner's internal plan dict, so skip detection matches the suite file."""

    def __init__(self, ledger: RunLedger, config: ExperimentConfig) -> None:
        self._ledger = ledger
        self._config = config

    def append_run(self, config, lineage, report, artifacts=None, started=None):
        from .ledger import RunLedgerEntry, _timestamp

        stored = self._config.to_dict()
        # Keep the resolved dataset id so reports can label grid columns
        # without re-reading manifests; the hash stays the suite config's.
        stored["target_manifest_id"] = config.get("target_manifest_id")
        entry = RunLedgerEntry(
            config_hash=self._config.hash,
            config=stored,
            status="completed",
            started=started or _timestamp(),
            finished=_timestamp(),
            lineage=lineage,
            report=report.to_dict(),
            artifacts=dict(artifacts or {}),
        )
        self._ledger.append(entry)
        return entry


def cmd_report(args) -> int:
    ledger = RunLedger(args.ledger)
    rows, cols, cells = grid_from_entries(ledger.entries())
    text = render_text(rows, cols, cells)
    print(text, end="")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(render_csv(rows, cols, cells), encoding="utf-8")
        print(f"csv written to {args.csv}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xfer",
        description="Transfer-learning experiments for remote-sensing scene classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="stratified train/test split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--role", required=True, choices=[r.value for r in SplitRole])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", dest="train_fraction", default=None,
                   help="override the role preset, e.g. 0.5")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("subset", help="class-based or half-images subset of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", required=True,
                   choices=["same_classes", "different_classes", "all_classes_half_images"])
    p.add_argument("--ref-classes", dest="ref_classes", help="file with one class name per line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_subset)

    p = sub.add_parser("import-checkpoint", help="convert external backbone weights")
    p.add_argument("--source-kind", dest="source_kind", required=True,
                   choices=["supervised", "swav"])
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_checkpoint)

    p = sub.add_parser("pretrain", help="supervised training from scratch on a source dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--backbone", default="reference_residual_50",
                   choices=[a.value for a in Architecture])
    p.add_argument("--schedule", choices=["scratch", "finetune"], default="scratch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--cache-images", dest="cache_images", action="store_true")
    _add_schedule_options(p)
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="domain-adaptive pre-training of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--label-mode", dest="label_mode", required=True, choices=["single", "multi"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--cache-images", dest="cache_images", action="store_true")
    _add_schedule_options(p)
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("transfer", help="run one transfer experiment")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", required=True, help="target manifest path")
    p.add_argument("--mode", required=True, choices=["fe", "ft"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    p.add_argument("--bootstrap-seed", dest="bootstrap_seed", type=int, default=None)
    p.add_argument("--ledger")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--cache-images", dest="cache_images", action="store_true")
    _add_schedule_options(p)
    _add_pipeline_options(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("run-suite", help="execute a suite of experiment configs")
    p.add_argument("suite")
    p.add_argument("--ledger", required=True)
    p.add_argument("--force", action="store_true", help="re-run completed configs")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--cache-images", dest="cache_images", action="store_true")
    p.set_defaults(func=cmd_run_suite)

    p = sub.add_parser("report", help="render the sources x targets result grid")
    p.add_argument("--ledger", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ImageReadError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
