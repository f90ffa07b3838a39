"""Backbones, classification heads, checkpoints and pre-training lineage.

Two architectures are supported: the 50-layer residual network used for
full-scale experiments (via torchvision, penultimate width 2048) and a small
three-block convolutional network for desk-scale tests (penultimate width
64).  Every checkpoint carries an append-only lineage of training stages so
the source/target separation rule can be enforced, plus the input
normalization its weights expect.

Checkpoint container: a single zip archive with a weights blob, a JSON
lineage/preprocessing sidecar and SHA-256 checksums of both.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

import torch
from torch import nn

from . import __version__ as _framework_version

CHECKPOINT_FORMAT_VERSION = 1

#: Channel statistics the common externally trained residual-network weights
#: expect, applied to inputs already scaled to [0, 1].
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ModelError(ValueError):
    """Raised for invalid model specs or incompatible weights."""


class CheckpointError(ValueError):
    """Raised for unreadable, corrupted or version-mismatched checkpoints."""


class Architecture(str, Enum):
    REFERENCE_RESIDUAL_50 = "reference_residual_50"
    TOY_CONV = "toy_conv"


FEATURE_DIMS = {Architecture.REFERENCE_RESIDUAL_50: 2048, Architecture.TOY_CONV: 64}


class OutputMode(str, Enum):
    EXCLUSIVE = "exclusive"      # softmax over classes, single-label
    INDEPENDENT = "independent"  # per-class sigmoid, multi-label


class Objective(str, Enum):
    SUPERVISED = "supervised"
    SELF_SUPERVISED_EXTERNAL = "self_supervised_external"


class StageKind(str, Enum):
    PRETRAIN = "pretrain"
    DOMAIN_ADAPT = "domain_adapt"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class BackboneSpec:
    architecture_id: Architecture
    init: str = "scratch"  # "scratch" | "from_checkpoint"
    checkpoint_ref: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "architecture_id", Architecture(self.architecture_id))
        if self.init not in ("scratch", "from_checkpoint"):
            raise ModelError(f"unknown init {self.init!r}")
        if self.init == "from_checkpoint" and not self.checkpoint_ref:
            raise ModelError("from_checkpoint init requires checkpoint_ref")

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIMS[self.architecture_id]


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int
    output_mode: OutputMode

    def __post_init__(self) -> None:
        object.__setattr__(self, "output_mode", OutputMode(self.output_mode))
        if self.num_classes < 1:
            raise ModelError(f"num_classes must be positive, got {self.num_classes}")


@dataclass(frozen=True, slots=True)
class LineageStage:
    dataset_id: str
    objective: Objective
    stage_kind: StageKind

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "objective": self.objective.value,
            "stage_kind": self.stage_kind.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LineageStage":
        return cls(
            dataset_id=data["dataset_id"],
            objective=Objective(data["objective"]),
            stage_kind=StageKind(data["stage_kind"]),
        )


@dataclass(frozen=True)
class ModelLineage:
    """Ordered provenance of training stages; grows by one entry per stage."""

    stages: tuple[LineageStage, ...] = ()

    def with_stage(self, stage: LineageStage) -> "ModelLineage":
        return ModelLineage(stages=self.stages + (stage,))

    @property
    def dataset_ids(self) -> tuple[str, ...]:
        return tuple(stage.dataset_id for stage in self.stages)

    def to_list(self) -> list[dict]:
        return [stage.to_dict() for stage in self.stages]

    @classmethod
    def from_list(cls, data: list) -> "ModelLineage":
        return cls(stages=tuple(LineageStage.from_dict(d) for d in data))


@dataclass(frozen=True)
class PreprocessingSpec:
    """Per-channel standardization applied to [0,1] inputs before the backbone."""

    mean: tuple[float, ...]
    std: tuple[float, ...]
    note: str = ""

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std), "note": self.note}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PreprocessingSpec":
        return cls(mean=tuple(data["mean"]), std=tuple(data["std"]), note=data.get("note", ""))


# --------------------------------------------------------------------------
# Architectures
# --------------------------------------------------------------------------


def _toy_conv_backbone() -> nn.Module:
    layers: list[nn.Module] = []
    channels = [3, 16, 32, 64]
    for c_in, c_out in zip(channels, channels[1:]):
        layers += [
            nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        ]
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers)


def _residual50_backbone() -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    net.fc = nn.Identity()
    return net


_BACKBONE_BUILDERS = {
    Architecture.TOY_CONV: _toy_conv_backbone,
    Architecture.REFERENCE_RESIDUAL_50: _residual50_backbone,
}


def _init_head(head: nn.Linear, generator: torch.Generator) -> None:
    # Zero bias, small uniform weights scaled by fan-in.
    fan_in = head.weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=generator)
        head.bias.zero_()


class ClassifierModel(nn.Module):
    """Backbone plus linear classification head.

    ``forward`` returns raw per-class logits; ``features`` returns the
    penultimate representation.  Input normalization (when configured) is
    applied inside the module so checkpointed weights always see the
    statistics they were trained with.
    """

    def __init__(
        self,
        architecture: Architecture,
        backbone: nn.Module,
        head: nn.Linear,
        head_spec: HeadSpec,
        lineage: ModelLineage,
        preprocessing: PreprocessingSpec | None,
    ) -> None:
        super().__init__()
        self.architecture = architecture
        self.feature_dim = FEATURE_DIMS[architecture]
        self.backbone = backbone
        self.head = head
        self.head_spec = head_spec
        self.lineage = lineage
        self.preprocessing: PreprocessingSpec | None = None
        self.set_preprocessing(preprocessing)

    def set_preprocessing(self, spec: PreprocessingSpec | None) -> None:
        self.preprocessing = spec
        if spec is not None:
            mean = torch.tensor(spec.mean, dtype=torch.float32).view(1, -1, 1, 1)
            std = torch.tensor(spec.std, dtype=torch.float32).view(1, -1, 1, 1)
            # Non-persistent: the authoritative copy lives in checkpoint meta,
            # not in the weights blob.  Drop any previous buffers first.
            self._buffers.pop("_norm_mean", None)
            self._buffers.pop("_norm_std", None)
            self.register_buffer("_norm_mean", mean, persistent=False)
            self.register_buffer("_norm_std", std, persistent=False)

    def _normalize(self, x: torch.Tensor) -> torch.Tensor:
        if self.preprocessing is None:
            return x
        return (x - self._norm_mean) / self._norm_std

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(self._normalize(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def build_model(
    backbone_spec: BackboneSpec,
    head_spec: HeadSpec,
    seed: int = 0,
    store: "CheckpointStore | None" = None,
) -> ClassifierModel:
    """Construct a model; scratch init is fully determined by the seed.

    ``from_checkpoint`` resolves the ref through the given store (or as a
    filesystem path) and loads backbone weights, lineage and preprocessing.
    """
    checkpoint = None
    if backbone_spec.init == "from_checkpoint":
        ref = backbone_spec.checkpoint_ref
        checkpoint = store.get(ref) if store is not None else load_checkpoint(ref)
        if checkpoint.architecture is not backbone_spec.architecture_id:
            raise ModelError(
                f"checkpoint holds {checkpoint.architecture.value}, "
                f"spec wants {backbone_spec.architecture_id.value}"
            )
    return _assemble(backbone_spec.architecture_id, head_spec, seed, checkpoint)


def model_from_checkpoint(
    checkpoint: "Checkpoint", head_spec: HeadSpec | None = None, seed: int = 0
) -> ClassifierModel:
    """Rebuild a model from a checkpoint; a fresh seeded head is attached when
    the checkpoint has none (or a different one is requested)."""
    if head_spec is None:
        if checkpoint.head_spec is None:
            raise ModelError("checkpoint has no head; a HeadSpec is required")
        head_spec = checkpoint.head_spec
    return _assemble(checkpoint.architecture, head_spec, seed, checkpoint)


def _assemble(
    architecture: Architecture,
    head_spec: HeadSpec,
    seed: int,
    checkpoint: "Checkpoint | None",
) -> ClassifierModel:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        backbone = _BACKBONE_BUILDERS[architecture]()
    head = nn.Linear(FEATURE_DIMS[architecture], head_spec.num_classes)
    gen = torch.Generator().manual_seed(seed)
    _init_head(head, gen)

    lineage = ModelLineage()
    preprocessing = None
    if checkpoint is not None:
        backbone.load_state_dict(checkpoint.backbone_state)
        lineage = checkpoint.lineage
        preprocessing = checkpoint.preprocessing
        if (
            checkpoint.head_state is not None
            and checkpoint.head_spec == head_spec
        ):
            head.load_state_dict(checkpoint.head_state)
    return ClassifierModel(architecture, backbone, head, head_spec, lineage, preprocessing)


def replace_head(
    model: ClassifierModel, head_spec: HeadSpec, seed: int | None = None
) -> ClassifierModel:
    """Swap in a freshly initialized head; backbone weights are untouched.

    The head is reinitialized even when the spec is unchanged.
    """
    head = nn.Linear(model.feature_dim, head_spec.num_classes)
    if seed is None:
        gen = torch.Generator()
        gen.seed()
    else:
        gen = torch.Generator().manual_seed(seed)
    _init_head(head, gen)
    model.head = head
    model.head_spec = head_spec
    return model


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    """In-memory view of a checkpoint archive."""

    architecture: Architecture
    backbone_state: Mapping[str, torch.Tensor]
    head_state: Mapping[str, torch.Tensor] | None
    head_spec: HeadSpec | None
    lineage: ModelLineage
    preprocessing: PreprocessingSpec | None
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIMS[self.architecture]


def checkpoint_from_model(
    model: ClassifierModel,
    lineage: ModelLineage | None = None,
    include_head: bool = True,
) -> Checkpoint:
    """Snapshot a model's weights into an immutable checkpoint."""
    return Checkpoint(
        architecture=model.architecture,
        backbone_state={k: v.detach().clone() for k, v in model.backbone.state_dict().items()},
        head_state=(
            {k: v.detach().clone() for k, v in model.head.state_dict().items()}
            if include_head
            else None
        ),
        head_spec=model.head_spec if include_head else None,
        lineage=model.lineage if lineage is None else lineage,
        preprocessing=model.preprocessing,
    )


def write_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    """Write the archive; returns the path (the checkpoint ref)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    payload = {"backbone": dict(checkpoint.backbone_state)}
    if checkpoint.head_state is not None:
        payload["head"] = dict(checkpoint.head_state)
    weights_buf = io.BytesIO()
    torch.save(payload, weights_buf)
    weights_bytes = weights_buf.getvalue()

    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "framework_version": _framework_version,
        "architecture": checkpoint.architecture.value,
        "feature_dim": checkpoint.feature_dim,
        "head": (
            {
                "num_classes": checkpoint.head_spec.num_classes,
                "output_mode": checkpoint.head_spec.output_mode.value,
            }
            if checkpoint.head_spec is not None
            else None
        ),
        "lineage": checkpoint.lineage.to_list(),
        "preprocessing": (
            checkpoint.preprocessing.to_dict() if checkpoint.preprocessing is not None else None
        ),
    }
    meta_bytes = json.dumps(meta, indent=2, sort_keys=True).encode("utf-8")
    checksum = (
        f"weights.pt {hashlib.sha256(weights_bytes).hexdigest()}\n"
        f"meta.json {hashlib.sha256(meta_bytes).hexdigest()}\n"
    )
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("weights.pt", weights_bytes)
        zf.writestr("meta.json", meta_bytes)
        zf.writestr("checksum.txt", checksum)
    return path


def save_checkpoint(
    model: ClassifierModel,
    path: str | Path,
    lineage: ModelLineage | None = None,
    include_head: bool = True,
) -> Path:
    return write_checkpoint(checkpoint_from_model(model, lineage, include_head), path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint archive (checksums, format version)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            weights_bytes = zf.read("weights.pt")
            meta_bytes = zf.read("meta.json")
            checksum_text = zf.read("checksum.txt").decode("utf-8")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint archive {path}: {exc}") from exc

    expected = dict(
        line.split(" ", 1) for line in checksum_text.strip().splitlines() if " " in line
    )
    for name, blob in (("weights.pt", weights_bytes), ("meta.json", meta_bytes)):
        digest = hashlib.sha256(blob).hexdigest()
        if expected.get(name) != digest:
            raise CheckpointError(f"{path}: checksum mismatch for {name} (corrupted archive)")

    meta = json.loads(meta_bytes.decode("utf-8"))
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    payload = torch.load(io.BytesIO(weights_bytes), map_location="cpu", weights_only=True)
    head_meta = meta.get("head")
    return Checkpoint(
        architecture=Architecture(meta["architecture"]),
        backbone_state=payload["backbone"],
        head_state=payload.get("head"),
        head_spec=(
            HeadSpec(head_meta["num_classes"], OutputMode(head_meta["output_mode"]))
            if head_meta
            else None
        ),
        lineage=ModelLineage.from_list(meta.get("lineage", [])),
        preprocessing=(
            PreprocessingSpec.from_dict(meta["preprocessing"])
            if meta.get("preprocessing")
            else None
        ),
        format_version=version,
    )


class CheckpointStore:
    """Resolves checkpoint refs (paths, optionally relative to a base dir)."""

    def __init__(self, base_dir: str | Path | None = None) -> None:
        self.base_dir = Path(base_dir) if base_dir is not None else None

    def resolve(self, ref: str | Path) -> Path:
        path = Path(ref)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return path

    def get(self, ref: str | Path) -> Checkpoint:
        return load_checkpoint(self.resolve(ref))

    def save(self, model: ClassifierModel, ref: str | Path, **kwargs) -> Path:
        return save_checkpoint(model, self.resolve(ref), **kwargs)


# --------------------------------------------------------------------------
# External checkpoint import
# --------------------------------------------------------------------------

_EXTERNAL_OBJECTIVES = {
    "supervised": Objective.SUPERVISED,
    "swav": Objective.SELF_SUPERVISED_EXTERNAL,
}

#: Key prefixes that belong to training-time extras of externally published
#: residual-network weights rather than to the backbone itself.
_EXTERNAL_DROP_PREFIXES = ("fc.", "projection_head", "prototypes", "classifier")


def import_external_checkpoint(
    source_kind: str,
    in_path: str | Path,
    out_path: str | Path,
    dataset_id: str = "imagenet1k",
) -> Path:
    """Convert an externally published 50-layer residual network state dict
    (a torch ``.pth`` file) into the framework checkpoint container.

    ``supervised`` imports record a supervised pre-training stage;
    ``swav`` imports record a self_supervised_external stage.  Keys are
    normalized (``module.`` prefixes stripped, projection/classifier heads
    dropped) and must then cover the backbone exactly.
    """
    if source_kind not in _EXTERNAL_OBJECTIVES:
        raise CheckpointError(
            f"unknown source kind {source_kind!r}; expected one of {sorted(_EXTERNAL_OBJECTIVES)}"
        )
    in_path = Path(in_path)
    if not in_path.exists():
        raise CheckpointError(f"external weights not found: {in_path}")
    payload = torch.load(in_path, map_location="cpu", weights_only=True)
    if isinstance(payload, Mapping) and "state_dict" in payload:
        payload = payload["state_dict"]
    if not isinstance(payload, Mapping):
        raise CheckpointError(f"{in_path}: expected a state dict")

    cleaned: dict[str, torch.Tensor] = {}
    for key, value in payload.items():
        if key.startswith("module."):
            key = key[len("module."):]
        if key.startswith(_EXTERNAL_DROP_PREFIXES):
            continue
        cleaned[key] = value

    backbone = _residual50_backbone()
    expected_keys = set(backbone.state_dict().keys())
    got_keys = set(cleaned.keys())
    if got_keys != expected_keys:
        missing = sorted(expected_keys - got_keys)[:5]
        extra = sorted(got_keys - expected_keys)[:5]
        raise CheckpointError(
            f"{in_path}: weights do not match the 50-layer residual backbone "
            f"(missing {missing}..., unexpected {extra}...)"
        )
    backbone.load_state_dict(cleaned)

    head_spec = HeadSpec(num_classes=1, output_mode=OutputMode.EXCLUSIVE)
    model = ClassifierModel(
        architecture=Architecture.REFERENCE_RESIDUAL_50,
        backbone=backbone,
        head=nn.Linear(FEATURE_DIMS[Architecture.REFERENCE_RESIDUAL_50], 1),
        head_spec=head_spec,
        lineage=ModelLineage(
            stages=(
                LineageStage(
                    dataset_id=dataset_id,
                    objective=_EXTERNAL_OBJECTIVES[source_kind],
                    stage_kind=StageKind.PRETRAIN,
                ),
            )
        ),
        preprocessing=PreprocessingSpec(
            mean=IMAGENET_MEAN,
            std=IMAGENET_STD,
            note=f"external {source_kind} import; inputs scaled to [0,1]",
        ),
    )
    return save_checkpoint(model, out_path, include_head=False)


# --------------------------------------------------------------------------
# Introspection helpers
# --------------------------------------------------------------------------


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers; bit-identity fingerprint."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def states_equal(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> bool:
    if set(a.keys()) != set(b.keys()):
        return False
    return all(torch.equal(a[k], b[k]) for k in a)
