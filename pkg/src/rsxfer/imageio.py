"""Image file access.

Decoding is delegated to Pillow; every image enters the framework as a
float32 H x W x C array scaled to [0, 1] with C in {1, 3}.  Relative image
refs resolve against an explicit data root or the XFER_DATA_ROOT environment
variable.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

DATA_ROOT_ENV = "XFER_DATA_ROOT"


class ImageReadError(RuntimeError):
    """Raised when an image file cannot be decoded; carries the offending ref."""


def resolve_ref(image_ref: str, data_root: str | Path | None = None) -> Path:
    path = Path(image_ref)
    if path.is_absolute():
        return path
    root = data_root if data_root is not None else os.environ.get(DATA_ROOT_ENV)
    return Path(root) / path if root else path


def read_image(path: str | Path) -> np.ndarray:
    """Decode to float32 [0,1], shape H x W x C."""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"failed to decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(array: np.ndarray, path: str | Path) -> Path:
    """Save a float [0,1] (or uint8) array as an image file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(arr * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)
    return path


class ImageSource:
    """Loads manifest records' pixels, optionally caching decoded arrays.

    Caching is meant for desk-scale datasets that fit in memory; full-scale
    runs should leave it off.
    """

    def __init__(self, data_root: str | Path | None = None, cache: bool = False) -> None:
        self.data_root = data_root
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def load(self, image_ref: str) -> np.ndarray:
        if self._cache is not None and image_ref in self._cache:
            return self._cache[image_ref]
        arr = read_image(resolve_ref(image_ref, self.data_root))
        if self._cache is not None:
            self._cache[image_ref] = arr
        return arr
