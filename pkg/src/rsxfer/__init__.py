"""rsxfer: a reproducible transfer-learning experiment framework for
remote-sensing scene classification.

Pipeline pieces: deterministic dataset manifests and stratified splits,
training/eval image transforms, two backbone architectures with lineage-
tracked checkpoints, supervised training with a warmup + step-decay
schedule, frozen-feature linear probing, end-to-end fine-tuning,
domain-adaptive pre-training chains, bootstrap confidence intervals and a
config-hashed run ledger behind the ``xfer`` CLI.
"""

__version__ = "0.1.0"

from .manifest import (
    DatasetManifest,
    LabelMode,
    ManifestError,
    ManifestRecord,
    ManifestRegistry,
    OverlapReport,
    SplitError,
    SplitRole,
    SplitSpec,
    SubsetError,
    SubsetMode,
    SubsetSpec,
    build_subset,
    class_overlap,
    load_manifest,
    normalize_class_name,
    save_manifest,
    stratified_split,
)
from .augment import (
    PipelineMode,
    TransformError,
    TransformPipeline,
    eval_transform,
    protocol_eval_pipeline,
    protocol_train_pipeline,
    train_transform,
)
from .models import (
    Architecture,
    BackboneSpec,
    Checkpoint,
    CheckpointError,
    CheckpointStore,
    ClassifierModel,
    HeadSpec,
    LineageStage,
    ModelError,
    ModelLineage,
    Objective,
    OutputMode,
    PreprocessingSpec,
    StageKind,
    build_model,
    checkpoint_from_model,
    import_external_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    replace_head,
    save_checkpoint,
    state_checksum,
    write_checkpoint,
)
from .training import (
    LossMode,
    ScheduleSpec,
    TrainLog,
    TrainingError,
    extract_features,
    finetune_schedule,
    lr_at,
    scratch_schedule,
    train,
)
from .transfer import (
    LinearProbe,
    ProbeSpec,
    TransferMode,
    TransferPlan,
    TransferRuleError,
    check_source_target_rule,
    domain_adapt,
    fine_tune,
    head_spec_for,
    linear_probe,
    run_transfer_experiment,
)
from .metrics import (
    BootstrapSpec,
    MetricError,
    MetricReport,
    PredictionRecord,
    accuracy,
    bootstrap_ci,
    f1_multilabel,
)
from .ledger import (
    ConfigError,
    ExperimentConfig,
    RunLedger,
    RunLedgerEntry,
    config_hash,
    load_suite,
)
