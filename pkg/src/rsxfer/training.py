"""Supervised training with warmup + step-decay scheduling, and frozen-feature
extraction.

The optimizer schedule: the learning rate rises linearly per optimizer step
over the warmup epochs until it reaches the peak, stays there, and is
multiplied by the decay factor at the start of each decay epoch,
cumulatively.  Presets: 100 epochs, batch 100, 5 warmup epochs, decays at
epochs 50/70/90 by 0.2, peak 3e-3 when training from scratch and 3e-4 when
fine-tuning.  Optimization uses Adam with default moment parameters and no
weight decay.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import (
    RESIZE_INTERPOLATION,
    PipelineMode,
    TransformPipeline,
    eval_transform,
    train_transform,
)
from .imageio import ImageSource
from .manifest import DatasetManifest, LabelMode
from .models import (
    ClassifierModel,
    LineageStage,
    Objective,
    OutputMode,
    PreprocessingSpec,
    StageKind,
)
from .seeding import derive_rng


class TrainingError(ValueError):
    """Raised for schedule violations or model/data mismatches."""


class LossMode(str, Enum):
    EXCLUSIVE_XENT = "exclusive_xent"              # softmax cross-entropy
    INDEPENDENT_BINARY_XENT = "independent_binary_xent"  # per-class sigmoid BCE


_LOSS_FOR_OUTPUT = {
    OutputMode.EXCLUSIVE: LossMode.EXCLUSIVE_XENT,
    OutputMode.INDEPENDENT: LossMode.INDEPENDENT_BINARY_XENT,
}


@dataclass(frozen=True)
class ScheduleSpec:
    peak_lr: float
    total_epochs: int = 100
    batch_size: int = 100
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (50, 70, 90)
    decay_factor: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "decay_epochs", tuple(sorted(self.decay_epochs)))
        if self.peak_lr <= 0:
            raise TrainingError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.total_epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise TrainingError("total_epochs/batch_size must be >= 1, warmup_epochs >= 0")
        if not 0 < self.decay_factor < 1:
            raise TrainingError(f"decay_factor must be in (0,1), got {self.decay_factor}")
        if self.decay_epochs:
            if not self.warmup_epochs < self.decay_epochs[0]:
                raise TrainingError("warmup must end before the first decay epoch")
            if not self.decay_epochs[-1] < self.total_epochs:
                raise TrainingError("decay epochs must precede total_epochs")
        elif self.warmup_epochs >= self.total_epochs:
            raise TrainingError("warmup_epochs must be < total_epochs")

    def to_dict(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "total_epochs": self.total_epochs,
            "batch_size": self.batch_size,
            "warmup_epochs": self.warmup_epochs,
            "decay_epochs": list(self.decay_epochs),
            "decay_factor": self.decay_factor,
        }


def scratch_schedule(**overrides) -> ScheduleSpec:
    """Training-from-scratch preset (peak 3e-3)."""
    overrides.setdefault("peak_lr", 3e-3)
    return ScheduleSpec(**overrides)


def finetune_schedule(**overrides) -> ScheduleSpec:
    """Fine-tuning preset (peak 3e-4)."""
    overrides.setdefault("peak_lr", 3e-4)
    return ScheduleSpec(**overrides)


SCHEDULE_PRESETS = {"scratch": scratch_schedule, "finetune": finetune_schedule}


def lr_at(schedule: ScheduleSpec, epoch: int, step_in_epoch: int, steps_per_epoch: int) -> float:
    """Learning rate for one optimizer step.

    Warmup is per step: the rate climbs from peak/(warmup_epochs*steps) on
    the first step to exactly the peak on the last warmup step.  After each
    decay epoch boundary the plateau value is peak * factor^k.
    """
    if steps_per_epoch < 1:
        raise TrainingError("steps_per_epoch must be >= 1")
    if not 0 <= epoch < schedule.total_epochs:
        raise TrainingError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if not 0 <= step_in_epoch < steps_per_epoch:
        raise TrainingError(f"step_in_epoch {step_in_epoch} outside [0, {steps_per_epoch})")
    warmup_steps = schedule.warmup_epochs * steps_per_epoch
    global_step = epoch * steps_per_epoch + step_in_epoch
    if global_step < warmup_steps:
        return schedule.peak_lr * (global_step + 1) / warmup_steps
    decays = sum(1 for d in schedule.decay_epochs if epoch >= d)
    return schedule.peak_lr * schedule.decay_factor**decays


@dataclass(frozen=True, slots=True)
class EpochLogEntry:
    epoch: int
    loss: float
    lr: float
    wall_time_s: float


@dataclass
class TrainLog:
    seed: int
    dataset_id: str
    schedule: ScheduleSpec
    loss_mode: LossMode
    entries: list[EpochLogEntry] = field(default_factory=list)
    resize_interpolation: str = RESIZE_INTERPOLATION

    @property
    def final_epochs(self) -> int:
        return len(self.entries)

    def losses(self) -> list[float]:
        return [e.loss for e in self.entries]

    def write_jsonl(self, path: str | Path) -> Path:
        """One JSON record per epoch, preceded by a run-metadata record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            header = {
                "type": "run",
                "seed": self.seed,
                "dataset_id": self.dataset_id,
                "loss_mode": self.loss_mode.value,
                "schedule": self.schedule.to_dict(),
                "resize_interpolation": self.resize_interpolation,
            }
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for entry in self.entries:
                fh.write(
                    json.dumps(
                        {
                            "type": "epoch",
                            "epoch": entry.epoch,
                            "loss": entry.loss,
                            "lr": entry.lr,
                            "wall_time_s": entry.wall_time_s,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        return path


def _check_compatibility(
    model: ClassifierModel, manifest: DatasetManifest, loss_mode: LossMode
) -> None:
    if _LOSS_FOR_OUTPUT[model.head_spec.output_mode] is not loss_mode:
        raise TrainingError(
            f"loss mode {loss_mode.value} does not match head output mode "
            f"{model.head_spec.output_mode.value}"
        )
    if manifest.num_classes != model.head_spec.num_classes:
        raise TrainingError(
            f"manifest has {manifest.num_classes} classes, head expects "
            f"{model.head_spec.num_classes}"
        )
    if loss_mode is LossMode.EXCLUSIVE_XENT and manifest.label_mode is not LabelMode.SINGLE_LABEL:
        raise TrainingError("exclusive_xent requires a single-label manifest")


def _batch_tensors(
    manifest: DatasetManifest,
    indices: np.ndarray,
    source: ImageSource,
    pipeline: TransformPipeline,
    rng: np.random.Generator | None,
    loss_mode: LossMode,
) -> tuple[torch.Tensor, torch.Tensor]:
    images = []
    for i in indices:
        rec = manifest.records[int(i)]
        raw = source.load(rec.image_ref)
        if pipeline.mode is PipelineMode.TRAIN:
            images.append(train_transform(raw, pipeline, rng))
        else:
            images.append(eval_transform(raw, pipeline))
    batch = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()
    if loss_mode is LossMode.EXCLUSIVE_XENT:
        labels = torch.tensor(
            [next(iter(manifest.records[int(i)].labels)) for i in indices], dtype=torch.long
        )
    else:
        hot = np.zeros((len(indices), manifest.num_classes), dtype=np.float32)
        for row, i in enumerate(indices):
            hot[row, sorted(manifest.records[int(i)].labels)] = 1.0
        labels = torch.from_numpy(hot)
    return batch, labels


def compute_loss(model: ClassifierModel, batch: torch.Tensor, labels: torch.Tensor,
                 loss_mode: LossMode) -> torch.Tensor:
    logits = model(batch)
    if loss_mode is LossMode.EXCLUSIVE_XENT:
        return F.cross_entropy(logits, labels)
    return F.binary_cross_entropy_with_logits(logits, labels)


def dataset_statistics(
    manifest: DatasetManifest, source: ImageSource
) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean/std of the raw [0,1] pixels over a manifest."""
    total = None
    total_sq = None
    count = 0
    for rec in manifest.records:
        arr = source.load(rec.image_ref).astype(np.float64)
        flat = arr.reshape(-1, arr.shape[2])
        if total is None:
            total = flat.sum(axis=0)
            total_sq = (flat**2).sum(axis=0)
        else:
            total += flat.sum(axis=0)
            total_sq += (flat**2).sum(axis=0)
        count += flat.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    std = np.maximum(np.sqrt(var), 1e-6)
    return tuple(float(m) for m in mean), tuple(float(s) for s in std)


def train(
    model: ClassifierModel,
    train_manifest: DatasetManifest,
    schedule: ScheduleSpec,
    pipeline: TransformPipeline,
    loss_mode: LossMode,
    seed: int,
    data_root: str | Path | None = None,
    stage_kind: StageKind = StageKind.PRETRAIN,
    cache_images: bool = False,
) -> tuple[ClassifierModel, TrainLog, LineageStage]:
    """Run the full schedule of seeded mini-batch optimization.

    Shuffling, augmentation draws and initialization all derive from the
    seeds, so a rerun with identical inputs reproduces the loss sequence.
    Appends exactly one lineage stage to the model.
    """
    loss_mode = LossMode(loss_mode)
    if pipeline.mode is not PipelineMode.TRAIN:
        raise TrainingError("train requires a train-mode transform pipeline")
    if not train_manifest.records:
        raise TrainingError("empty training manifest")
    _check_compatibility(model, train_manifest, loss_mode)

    source = ImageSource(data_root=data_root, cache=cache_images)
    if model.preprocessing is None:
        mean, std = dataset_statistics(train_manifest, source)
        model.set_preprocessing(
            PreprocessingSpec(
                mean=mean,
                std=std,
                note=(
                    f"computed on {train_manifest.dataset_id}; inputs scaled to [0,1]; "
                    f"{RESIZE_INTERPOLATION} resize"
                ),
            )
        )

    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.peak_lr)
    n = len(train_manifest.records)
    steps_per_epoch = (n + schedule.batch_size - 1) // schedule.batch_size
    log = TrainLog(
        seed=seed, dataset_id=train_manifest.dataset_id, schedule=schedule, loss_mode=loss_mode
    )

    model.train()
    for epoch in range(schedule.total_epochs):
        started = time.perf_counter()
        order = derive_rng("order", seed, epoch).permutation(n)
        aug_rng = derive_rng("augment", pipeline.seed, seed, epoch)
        loss_sum = 0.0
        last_lr = schedule.peak_lr
        for step in range(steps_per_epoch):
            batch_idx = order[step * schedule.batch_size : (step + 1) * schedule.batch_size]
            batch, labels = _batch_tensors(
                train_manifest, batch_idx, source, pipeline, aug_rng, loss_mode
            )
            last_lr = lr_at(schedule, epoch, step, steps_per_epoch)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            optimizer.zero_grad()
            loss = compute_loss(model, batch, labels, loss_mode)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(batch_idx)
        log.entries.append(
            EpochLogEntry(
                epoch=epoch,
                loss=loss_sum / n,
                lr=last_lr,
                wall_time_s=time.perf_counter() - started,
            )
        )

    stage = LineageStage(
        dataset_id=train_manifest.dataset_id,
        objective=Objective.SUPERVISED,
        stage_kind=stage_kind,
    )
    model.lineage = model.lineage.with_stage(stage)
    return model, log, stage


def extract_features(
    model: ClassifierModel,
    manifest: DatasetManifest,
    pipeline: TransformPipeline,
    data_root: str | Path | None = None,
    batch_size: int = 100,
    cache_images: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-backbone features for every record, in manifest order.

    Returns (features [n, feature_dim], labels [n, num_classes] multi-hot).
    The model is run in eval mode under no_grad, so weights and buffers are
    untouched.
    """
    if pipeline.mode is not PipelineMode.EVAL:
        raise TrainingError("extract_features requires an eval-mode pipeline")
    source = ImageSource(data_root=data_root, cache=cache_images)
    was_training = model.training
    model.eval()
    n = len(manifest.records)
    features = np.empty((n, model.feature_dim), dtype=np.float32)
    labels = np.zeros((n, manifest.num_classes), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            batch, _ = _batch_tensors(
                manifest, idx, source, pipeline, None, LossMode.INDEPENDENT_BINARY_XENT
            )
            features[idx] = model.features(batch).cpu().numpy()
    for row, rec in enumerate(manifest.records):
        labels[row, sorted(rec.labels)] = 1.0
    if was_training:
        model.train()
    return features, labels
