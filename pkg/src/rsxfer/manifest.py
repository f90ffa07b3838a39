"""Dataset manifests: loading, validation, stratified splitting and subsetting.

A manifest is an immutable listing of image records with single- or
multi-label annotations and an ordered class vocabulary.  The on-disk format
is line-delimited UTF-8 text::

    #dataset_id=<id>;label_mode=<single_label|multi_label>;classes=<comma list>
    <image_ref>\\t<label1>[,<label2>,...]

Labels on record lines are integer indices into the header's class list.
Extra ``key=value`` pairs in the header are kept as informational metadata
(image size, ground resolution, ...).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Mapping

from .seeding import derive_seed


class ManifestError(ValueError):
    """Raised for malformed manifest files or invariant violations."""


class SplitError(ValueError):
    """Raised when a stratified split cannot satisfy its contract."""


class SubsetError(ValueError):
    """Raised when a subset construction yields an invalid result."""


class LabelMode(str, Enum):
    SINGLE_LABEL = "single_label"
    MULTI_LABEL = "multi_label"


def normalize_class_name(name: str) -> str:
    """Canonical form used whenever class names from two datasets are matched:
    lowercase, trimmed, spaces and hyphens replaced with underscores."""
    return name.strip().lower().replace(" ", "_").replace("-", "_")


@dataclass(frozen=True, slots=True)
class ManifestRecord:
    image_ref: str
    labels: frozenset[int]

    def primary_label(self) -> int:
        """Lowest label index; the stratification/grouping key for multi-label
        records and the single label otherwise."""
        return min(self.labels)


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable image listing with a class vocabulary.

    Invariants (checked on construction): label indices in range, exactly one
    label per record in single-label mode and at least one in multi-label
    mode, unique image refs, no duplicate class names.
    """

    dataset_id: str
    label_mode: LabelMode
    classes: tuple[str, ...]
    records: tuple[ManifestRecord, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.dataset_id:
            raise ManifestError("dataset_id must be non-empty")
        if not self.classes:
            raise ManifestError("class vocabulary must be non-empty")
        if len(set(self.classes)) != len(self.classes):
            raise ManifestError(f"duplicate class names in {self.dataset_id!r}")
        for name in self.classes:
            if any(ch in name for ch in ",;\t\n"):
                raise ManifestError(f"class name {name!r} contains a reserved character")
        n_classes = len(self.classes)
        seen: set[str] = set()
        for rec in self.records:
            if "\t" in rec.image_ref or "\n" in rec.image_ref:
                raise ManifestError(f"image_ref {rec.image_ref!r} contains a reserved character")
            if rec.image_ref in seen:
                raise ManifestError(f"duplicate image_ref {rec.image_ref!r}")
            seen.add(rec.image_ref)
            if not rec.labels:
                raise ManifestError(f"record {rec.image_ref!r} has no labels")
            if self.label_mode is LabelMode.SINGLE_LABEL and len(rec.labels) != 1:
                raise ManifestError(
                    f"record {rec.image_ref!r} has {len(rec.labels)} labels in single_label mode"
                )
            for lab in rec.labels:
                if not 0 <= lab < n_classes:
                    raise ManifestError(
                        f"record {rec.image_ref!r} label {lab} outside [0, {n_classes})"
                    )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_names(self, rec: ManifestRecord) -> tuple[str, ...]:
        return tuple(self.classes[i] for i in sorted(rec.labels))

    def records_by_stratum(self) -> dict[int, list[ManifestRecord]]:
        """Group records by primary label.  For multi-label manifests only the
        observed primary labels form strata."""
        groups: dict[int, list[ManifestRecord]] = {}
        for rec in self.records:
            groups.setdefault(rec.primary_label(), []).append(rec)
        return groups

    def replace(self, **changes) -> "DatasetManifest":
        from dataclasses import replace as _replace

        return _replace(self, **changes)


# --------------------------------------------------------------------------
# File format
# --------------------------------------------------------------------------

_REQUIRED_HEADER_KEYS = ("dataset_id", "label_mode", "classes")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest file, validating every invariant along the way."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ManifestError(f"{path}: missing '#dataset_id=...' header line")
    header = _parse_header(lines[0], path)
    mode = header.pop("label_mode")
    try:
        label_mode = LabelMode(mode)
    except ValueError:
        raise ManifestError(f"{path}: unknown label_mode {mode!r}") from None
    classes = tuple(c.strip() for c in header.pop("classes").split(",") if c.strip())
    dataset_id = header.pop("dataset_id")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected 'image_ref<TAB>labels'")
        image_ref, label_field = parts
        labels = []
        for token in label_field.split(","):
            token = token.strip()
            if not token:
                continue
            try:
                labels.append(int(token))
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-integer label {token!r}") from None
        records.append(ManifestRecord(image_ref=image_ref, labels=frozenset(labels)))

    try:
        return DatasetManifest(
            dataset_id=dataset_id,
            label_mode=label_mode,
            classes=classes,
            records=tuple(records),
            metadata=header,
        )
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def _parse_header(line: str, path: Path) -> dict[str, str]:
    fields: dict[str, str] = {}
    for segment in line.lstrip("#").split(";"):
        segment = segment.strip()
        if not segment:
            continue
        if "=" not in segment:
            raise ManifestError(f"{path}: malformed header segment {segment!r}")
        key, value = segment.split("=", 1)
        fields[key.strip()] = value.strip()
    missing = [k for k in _REQUIRED_HEADER_KEYS if k not in fields]
    if missing:
        raise ManifestError(f"{path}: header missing {missing}")
    return fields


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write a manifest in the line-delimited text format (lossless round-trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = (
        f"#dataset_id={manifest.dataset_id}"
        f";label_mode={manifest.label_mode.value}"
        f";classes={','.join(manifest.classes)}"
    )
    for key, value in manifest.metadata.items():
        if any(ch in f"{key}{value}" for ch in ";=\n"):
            raise ManifestError(f"metadata {key!r}={value!r} contains a reserved character")
        header += f";{key}={value}"
    with path.open("w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for rec in manifest.records:
            labels = ",".join(str(i) for i in sorted(rec.labels))
            fh.write(f"{rec.image_ref}\t{labels}\n")
    return path


# --------------------------------------------------------------------------
# Stratified splitting
# --------------------------------------------------------------------------


class SplitRole(str, Enum):
    SOURCE = "source"
    TARGET = "target"


#: Protocol presets: source datasets train on 80% of each class, target
#: datasets on 20%, the remainder being the test portion in both cases.
ROLE_FRACTIONS = {SplitRole.SOURCE: Fraction(4, 5), SplitRole.TARGET: Fraction(1, 5)}


def _as_fraction(value: float | str | Fraction) -> Fraction:
    # Fraction(str(x)) keeps the decimal the caller wrote, e.g. 0.7 -> 7/10,
    # so floor(fraction * n) is exact rational arithmetic.
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


@dataclass(frozen=True)
class SplitSpec:
    """How to split one manifest: per-class train fraction, seed and role."""

    train_fraction: Fraction
    seed: int
    role: SplitRole

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_fraction", _as_fraction(self.train_fraction))
        object.__setattr__(self, "role", SplitRole(self.role))
        if not 0 < self.train_fraction < 1:
            raise SplitError(f"train_fraction must be in (0,1), got {self.train_fraction}")

    @classmethod
    def for_role(cls, role: SplitRole | str, seed: int) -> "SplitSpec":
        role = SplitRole(role)
        return cls(train_fraction=ROLE_FRACTIONS[role], seed=seed, role=role)


def stratified_split(
    manifest: DatasetManifest, spec: SplitSpec
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split per class: records are sorted by image_ref, shuffled with a
    seeded generator keyed on (seed, dataset, class), and the first
    floor(train_fraction * n_c) go to train.

    Returns (train, test) manifests over the same class vocabulary.  Equal
    inputs give byte-identical outputs on every platform; changing the seed
    changes membership but never the per-class counts.
    """
    train_refs: set[str] = set()
    for class_idx, group in sorted(manifest.records_by_stratum().items()):
        n = len(group)
        k = math.floor(spec.train_fraction * n)
        if k == 0 or k == n:
            raise SplitError(
                f"class {manifest.classes[class_idx]!r} has {n} records; "
                f"fraction {spec.train_fraction} leaves an empty train or test portion"
            )
        ordered = sorted(group, key=lambda r: r.image_ref)
        rng = random.Random(
            derive_seed("split", spec.seed, manifest.dataset_id, manifest.classes[class_idx])
        )
        rng.shuffle(ordered)
        train_refs.update(rec.image_ref for rec in ordered[:k])

    train_records = tuple(r for r in manifest.records if r.image_ref in train_refs)
    test_records = tuple(r for r in manifest.records if r.image_ref not in train_refs)
    train = manifest.replace(records=train_records)
    test = manifest.replace(records=test_records)
    return train, test


# --------------------------------------------------------------------------
# Subsets
# --------------------------------------------------------------------------


class SubsetMode(str, Enum):
    SAME_CLASSES = "same_classes"
    DIFFERENT_CLASSES = "different_classes"
    ALL_CLASSES_HALF_IMAGES = "all_classes_half_images"


@dataclass(frozen=True)
class SubsetSpec:
    mode: SubsetMode
    reference_classes: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", SubsetMode(self.mode))
        object.__setattr__(self, "reference_classes", tuple(self.reference_classes))
        if self.mode is not SubsetMode.ALL_CLASSES_HALF_IMAGES and not self.reference_classes:
            raise SubsetError(f"{self.mode.value} requires non-empty reference_classes")


def build_subset(manifest: DatasetManifest, spec: SubsetSpec) -> DatasetManifest:
    """Carve a sub-dataset out of a manifest.

    ``same_classes`` keeps records whose class (primary label for multi-label
    records) matches the reference list under name normalization;
    ``different_classes`` keeps the complement, so the two modes partition the
    records exactly.  ``all_classes_half_images`` keeps floor(n_c/2) records
    per class, sampled deterministically by seed.  The output vocabulary
    contains only classes that still carry at least one record.
    """
    metadata = dict(manifest.metadata)
    metadata["subset_mode"] = spec.mode.value
    if spec.mode is SubsetMode.ALL_CLASSES_HALF_IMAGES:
        kept = _half_images(manifest, spec.seed)
        metadata["subset_seed"] = str(spec.seed)
    else:
        reference = {normalize_class_name(c) for c in spec.reference_classes}
        wanted = spec.mode is SubsetMode.SAME_CLASSES
        kept = [
            rec
            for rec in manifest.records
            if (normalize_class_name(manifest.classes[rec.primary_label()]) in reference) == wanted
        ]
        # Keep the exact matched list for provenance: name matching across
        # datasets is heuristic and must be auditable later.
        matched = sorted(
            reference & {normalize_class_name(c) for c in manifest.classes}
        )
        metadata["matched_reference_classes"] = ",".join(matched)
    if not kept:
        raise SubsetError(f"subset {spec.mode.value} of {manifest.dataset_id!r} is empty")

    used = sorted({lab for rec in kept for lab in rec.labels})
    new_classes = tuple(manifest.classes[i] for i in used)
    remap = {old: new for new, old in enumerate(used)}
    new_records = tuple(
        ManifestRecord(rec.image_ref, frozenset(remap[lab] for lab in rec.labels))
        for rec in kept
    )
    return DatasetManifest(
        dataset_id=f"{manifest.dataset_id}_{spec.mode.value}",
        label_mode=manifest.label_mode,
        classes=new_classes,
        records=new_records,
        metadata=metadata,
    )


def _half_images(manifest: DatasetManifest, seed: int) -> list[ManifestRecord]:
    kept: list[ManifestRecord] = []
    for class_idx, group in sorted(manifest.records_by_stratum().items()):
        k = len(group) // 2
        ordered = sorted(group, key=lambda r: r.image_ref)
        rng = random.Random(
            derive_seed("subset_half", seed, manifest.dataset_id, manifest.classes[class_idx])
        )
        rng.shuffle(ordered)
        kept.extend(ordered[:k])
    by_ref = {rec.image_ref: rec for rec in kept}
    return [rec for rec in manifest.records if rec.image_ref in by_ref]


# --------------------------------------------------------------------------
# Class overlap
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlapReport:
    shared: tuple[str, ...]
    only_a: tuple[str, ...]
    only_b: tuple[str, ...]
    jaccard: float


def class_overlap(a: DatasetManifest, b: DatasetManifest) -> OverlapReport:
    """Compare two class vocabularies under name normalization.

    Jaccard index = |A∩B| / |A∪B|; 1.0 for two empty vocabularies.
    """
    names_a = {normalize_class_name(c) for c in a.classes}
    names_b = {normalize_class_name(c) for c in b.classes}
    shared = names_a & names_b
    union = names_a | names_b
    jaccard = len(shared) / len(union) if union else 1.0
    return OverlapReport(
        shared=tuple(sorted(shared)),
        only_a=tuple(sorted(names_a - names_b)),
        only_b=tuple(sorted(names_b - names_a)),
        jaccard=jaccard,
    )


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------


class ManifestRegistry:
    """Resolves dataset ids to manifests for the experiment runner.

    Manifests may be registered eagerly or as paths loaded on first use.
    """

    def __init__(self) -> None:
        self._manifests: dict[str, DatasetManifest] = {}
        self._paths: dict[str, Path] = {}

    def register(self, manifest: DatasetManifest) -> None:
        self._manifests[manifest.dataset_id] = manifest

    def register_path(self, dataset_id: str, path: str | Path) -> None:
        self._paths[dataset_id] = Path(path)

    def get(self, dataset_id: str) -> DatasetManifest:
        if dataset_id not in self._manifests and dataset_id in self._paths:
            self._manifests[dataset_id] = load_manifest(self._paths[dataset_id])
        try:
            return self._manifests[dataset_id]
        except KeyError:
            raise KeyError(f"unknown dataset_id {dataset_id!r}") from None

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(set(self._manifests) | set(self._paths)))
