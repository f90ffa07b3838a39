"""Procedural two-domain texture datasets for desk-scale experiments.

The world holds two groups of classes: "layout" classes, identified by a
fixed smooth random field rendered with a shared neutral palette, and "tint"
classes, identified purely by color while their spatial structure is redrawn
per instance.  Features that separate layout classes must encode spatial
texture, so pre-training on tint classes transfers poorly to a layout target
task — the class-overlap effect at toy scale.

Both domains render the same classes with different global statistics
(palette rotation, contrast, noise), standing in for the generic-domain vs
in-domain gap.  All rendering is seeded and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imageio import write_image
from .manifest import DatasetManifest, LabelMode, ManifestRecord, save_manifest
from .seeding import derive_rng


@dataclass(frozen=True)
class ToyWorldSpec:
    n_layout_classes: int = 8
    n_tint_classes: int = 8
    image_size: int = 40
    grid: int = 7           # prototype field resolution
    pattern_amp: float = 0.22
    noise_std: float = 0.06
    seed: int = 0


def _smooth_field(rng: np.random.Generator, grid: int, size: int) -> np.ndarray:
    """Zero-mean, unit-std smooth random field from a bilinear-upsampled grid."""
    coarse = rng.normal(size=(grid, grid))
    t = torch.from_numpy(coarse).double()[None, None]
    fine = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    field = fine[0, 0].numpy()
    field -= field.mean()
    std = field.std()
    return field / (std if std > 1e-9 else 1.0)


class ToyTextureWorld:
    """Seeded renderer for the two-domain texture classes."""

    def __init__(self, spec: ToyWorldSpec = ToyWorldSpec()) -> None:
        self.spec = spec
        self.layouts = [
            _smooth_field(derive_rng("toy_layout", spec.seed, k), spec.grid, spec.image_size)
            for k in range(spec.n_layout_classes)
        ]
        # Distinct tint directions on the RGB simplex for the color classes.
        self.tints = []
        for j in range(spec.n_tint_classes):
            rng = derive_rng("toy_tint", spec.seed, j)
            direction = rng.dirichlet([1.0, 1.0, 1.0])
            self.tints.append(0.25 + 1.5 * direction)

    @property
    def n_classes(self) -> int:
        return self.spec.n_layout_classes + self.spec.n_tint_classes

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(
            [f"layout_{k:02d}" for k in range(self.spec.n_layout_classes)]
            + [f"tint_{j:02d}" for j in range(self.spec.n_tint_classes)]
        )

    def render(self, domain: str, class_idx: int, rng: np.random.Generator) -> np.ndarray:
        """One instance image in [0,1], shape (size, size, 3)."""
        if domain not in ("generic", "indomain"):
            raise ValueError(f"unknown domain {domain!r}")
        spec = self.spec
        size = spec.image_size
        if class_idx < spec.n_layout_classes:
            field = self.layouts[class_idx]
            field = np.roll(field, shift=(rng.integers(size), rng.integers(size)), axis=(0, 1))
            weights = np.array([1.0, 1.0, 1.0])
        else:
            field = _smooth_field(rng, spec.grid, size)
            weights = self.tints[class_idx - spec.n_layout_classes]

        img = 0.5 + spec.pattern_amp * field[:, :, None] * weights[None, None, :]
        if domain == "generic":
            # Generic domain: rotated palette, lower contrast, heavier noise,
            # global brightness jitter.
            img = 0.5 + 0.7 * (img[:, :, [2, 0, 1]] - 0.5)
            img += rng.normal(scale=1.6 * spec.noise_std, size=img.shape)
            img += rng.uniform(-0.08, 0.08)
        else:
            img += rng.normal(scale=spec.noise_std, size=img.shape)
            img += rng.uniform(-0.04, 0.04)
        return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_dataset(
    root: str | Path,
    dataset_id: str,
    world: ToyTextureWorld,
    domain: str,
    class_indices: list[int] | range,
    n_per_class: int,
    seed: int,
) -> DatasetManifest:
    """Render a dataset to ``root`` and write its manifest.

    Image refs are relative to ``root`` (use it as the data root when
    training).  Returns the manifest, which is also saved as
    ``root/<dataset_id>.manifest``.
    """
    root = Path(root)
    names = world.class_names
    classes = tuple(names[i] for i in class_indices)
    records = []
    for new_idx, class_idx in enumerate(class_indices):
        for i in range(n_per_class):
            rng = derive_rng("toy_img", world.spec.seed, dataset_id, seed, class_idx, i)
            img = world.render(domain, class_idx, rng)
            ref = f"{dataset_id}/{names[class_idx]}/img_{i:04d}.png"
            write_image(img, root / ref)
            records.append(ManifestRecord(image_ref=ref, labels=frozenset({new_idx})))
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        label_mode=LabelMode.SINGLE_LABEL,
        classes=classes,
        records=tuple(records),
        metadata={"domain": domain, "image_size": str(world.spec.image_size)},
    )
    save_manifest(manifest, root / f"{dataset_id}.manifest")
    return manifest
