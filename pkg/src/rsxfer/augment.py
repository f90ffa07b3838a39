"""Image transform pipelines for training and evaluation.

Training: resize to ``resize_edge`` (bilinear, aspect ratio not preserved),
random crop of ``crop_edge``, independent left-right and up-down flips with
probability 0.5 each, then a rotation drawn uniformly from the rotation set
(360 degrees is the identity).  Evaluation: resize then center crop, fully
deterministic.

Images are H x W x C numpy arrays with C in {1, 3}.  Pixel normalization is
deliberately not done here; it travels with model checkpoints so externally
pre-trained weights keep their own input statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .seeding import derive_rng

#: Interpolation used by every resize in the framework; recorded in run
#: metadata because checkpoint portability depends on it.
RESIZE_INTERPOLATION = "bilinear_no_antialias"


class TransformError(ValueError):
    """Raised for invalid pipeline specs or malformed image arrays."""


class PipelineMode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class TransformPipeline:
    mode: PipelineMode
    resize_edge: int = 292
    crop_edge: int = 256
    rotation_set: tuple[int, ...] = (90, 180, 270, 360)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", PipelineMode(self.mode))
        if self.resize_edge < 1 or self.crop_edge < 1:
            raise TransformError("resize_edge and crop_edge must be positive")
        if self.crop_edge > self.resize_edge:
            raise TransformError(
                f"crop_edge {self.crop_edge} exceeds resize_edge {self.resize_edge}"
            )
        if any(deg % 90 != 0 for deg in self.rotation_set):
            raise TransformError(f"rotation_set {self.rotation_set} has a non-multiple of 90")
        if not self.rotation_set:
            raise TransformError("rotation_set must be non-empty")

    def rng(self) -> np.random.Generator:
        """Fresh seeded stream; workers derive sub-streams via derive_rng."""
        return derive_rng("augment", self.seed)


def _check_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise TransformError(f"expected HxWxC with C in {{1,3}}, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise TransformError(f"non-positive image dimensions {arr.shape[:2]}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def resize_bilinear(image: np.ndarray, edge: int) -> np.ndarray:
    """Resize to edge x edge without preserving aspect ratio."""
    arr = _check_image(image)
    if arr.shape[0] == edge and arr.shape[1] == edge:
        return arr.copy()
    tensor = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(tensor, size=(edge, edge), mode="bilinear", align_corners=False)
    return resized.squeeze(0).permute(1, 2, 0).numpy()


def center_crop(image: np.ndarray, edge: int) -> np.ndarray:
    arr = _check_image(image)
    top = (arr.shape[0] - edge) // 2
    left = (arr.shape[1] - edge) // 2
    return arr[top : top + edge, left : left + edge, :]


def train_transform(
    image: np.ndarray,
    pipeline: TransformPipeline,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply the randomized training pipeline.

    Without an explicit ``rng`` a fresh stream seeded from the pipeline is
    used, so repeated calls replay identically; the training loop passes a
    long-lived derived stream to vary draws across samples and epochs.
    """
    if pipeline.mode is not PipelineMode.TRAIN:
        raise TransformError("train_transform requires a train-mode pipeline")
    if rng is None:
        rng = pipeline.rng()
    arr = resize_bilinear(image, pipeline.resize_edge)

    span = pipeline.resize_edge - pipeline.crop_edge
    top = int(rng.integers(0, span + 1))
    left = int(rng.integers(0, span + 1))
    arr = arr[top : top + pipeline.crop_edge, left : left + pipeline.crop_edge, :]

    if rng.random() < 0.5:
        arr = arr[:, ::-1, :]
    if rng.random() < 0.5:
        arr = arr[::-1, :, :]
    degrees = pipeline.rotation_set[int(rng.integers(0, len(pipeline.rotation_set)))]
    arr = np.rot90(arr, k=(degrees // 90) % 4, axes=(0, 1))
    return np.ascontiguousarray(arr)


def eval_transform(image: np.ndarray, pipeline: TransformPipeline) -> np.ndarray:
    """Resize then center crop; consumes no randomness."""
    if pipeline.mode is not PipelineMode.EVAL:
        raise TransformError("eval_transform requires an eval-mode pipeline")
    arr = resize_bilinear(image, pipeline.resize_edge)
    return np.ascontiguousarray(center_crop(arr, pipeline.crop_edge))


def protocol_train_pipeline(seed: int = 0) -> TransformPipeline:
    """The 292 -> 256 training pipeline used for all full-scale runs."""
    return TransformPipeline(mode=PipelineMode.TRAIN, seed=seed)


def protocol_eval_pipeline() -> TransformPipeline:
    return TransformPipeline(mode=PipelineMode.EVAL)
