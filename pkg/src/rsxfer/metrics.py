"""Classification metrics and nonparametric bootstrap confidence intervals.

Single-label tasks report accuracy (argmax prediction, ties broken towards
the lowest class index).  Multi-label tasks report micro-averaged F1 with a
strict ``score > threshold`` decision at threshold 0.5, pooling true/false
positive and false negative counts over all (example, class) pairs.

Confidence intervals follow the standard percentile bootstrap: resamples of
the test set with replacement, the metric evaluated on each, and the 2.5/97.5
empirical percentiles reported around the full-set point estimate.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class MetricError(ValueError):
    """Raised for empty inputs or inconsistent prediction records."""


@dataclass(frozen=True, slots=True)
class PredictionRecord:
    """Per-example scores plus ground truth.

    ``scores`` has one entry per class.  ``true_labels`` holds a single index
    for single-label tasks and the full label set for multi-label tasks.
    """

    scores: tuple[float, ...]
    true_labels: frozenset[int]
    example_id: str = ""


def _validated(records: Sequence[PredictionRecord]) -> Sequence[PredictionRecord]:
    if not records:
        raise MetricError("empty record list")
    width = len(records[0].scores)
    for rec in records:
        if len(rec.scores) != width:
            raise MetricError(
                f"record {rec.example_id!r} has {len(rec.scores)} scores, expected {width}"
            )
    return records


def predicted_class(scores: Sequence[float]) -> int:
    """Argmax with ties broken towards the lowest index."""
    return max(range(len(scores)), key=lambda i: (scores[i], -i))


def accuracy(records: Sequence[PredictionRecord]) -> float:
    """Fraction of records whose argmax matches the single true label."""
    records = _validated(records)
    correct = 0
    for rec in records:
        if len(rec.true_labels) != 1:
            raise MetricError(f"record {rec.example_id!r} is not single-label")
        if predicted_class(rec.scores) == next(iter(rec.true_labels)):
            correct += 1
    return correct / len(records)


def f1_multilabel(records: Sequence[PredictionRecord], threshold: float = 0.5) -> float:
    """Micro-averaged F1 over all (example, class) decisions at the threshold.

    Scores exactly equal to the threshold count as negative decisions.  When
    there is nothing to find and nothing was predicted the score is 1.0.
    """
    records = _validated(records)
    tp = fp = fn = 0
    for rec in records:
        for cls, score in enumerate(rec.scores):
            decided = score > threshold
            truth = cls in rec.true_labels
            if decided and truth:
                tp += 1
            elif decided:
                fp += 1
            elif truth:
                fn += 1
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


@dataclass(frozen=True)
class BootstrapSpec:
    replicates: int = 1000
    percentiles: tuple[float, float] = (2.5, 97.5)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise MetricError("replicates must be >= 1")
        low, high = self.percentiles
        if not 0 < low < high < 100:
            raise MetricError(f"invalid percentile pair {self.percentiles}")


@dataclass(frozen=True)
class MetricReport:
    """Point estimate on the full test set plus bootstrap interval."""

    metric: str
    point: float
    ci_low: float
    ci_high: float
    n_test: int
    bootstrap: BootstrapSpec = field(default_factory=BootstrapSpec)

    def __post_init__(self) -> None:
        if self.ci_low > self.ci_high:
            raise MetricError(f"ci_low {self.ci_low} > ci_high {self.ci_high}")
        for value in (self.point, self.ci_low, self.ci_high):
            if not 0.0 <= value <= 1.0:
                raise MetricError(f"metric value {value} outside [0, 1]")

    def format_percent(self) -> str:
        """Render as e.g. '92.41 (92.27, 92.54)'."""
        return (
            f"{100 * self.point:.2f} "
            f"({100 * self.ci_low:.2f}, {100 * self.ci_high:.2f})"
        )

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_test": self.n_test,
            "bootstrap": {
                "replicates": self.bootstrap.replicates,
                "percentiles": list(self.bootstrap.percentiles),
                "seed": self.bootstrap.seed,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        bs = data.get("bootstrap", {})
        return cls(
            metric=data["metric"],
            point=data["point"],
            ci_low=data["ci_low"],
            ci_high=data["ci_high"],
            n_test=data["n_test"],
            bootstrap=BootstrapSpec(
                replicates=bs.get("replicates", 1000),
                percentiles=tuple(bs.get("percentiles", (2.5, 97.5))),
                seed=bs.get("seed", 0),
            ),
        )


def _replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    # Independent per-replicate streams so replicate evaluation order never
    # matters (spawn keys are stable, unlike sequential draws).
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(replicate,))))


def _accuracy_stats(records: Sequence[PredictionRecord]) -> np.ndarray:
    correct = np.zeros(len(records), dtype=np.int64)
    for i, rec in enumerate(records):
        if len(rec.true_labels) != 1:
            raise MetricError(f"record {rec.example_id!r} is not single-label")
        correct[i] = int(predicted_class(rec.scores) == next(iter(rec.true_labels)))
    return correct


def _f1_stats(records: Sequence[PredictionRecord], threshold: float) -> np.ndarray:
    stats = np.zeros((len(records), 3), dtype=np.int64)
    for i, rec in enumerate(records):
        tp = fp = fn = 0
        for cls, score in enumerate(rec.scores):
            decided = score > threshold
            truth = cls in rec.true_labels
            if decided and truth:
                tp += 1
            elif decided:
                fp += 1
            elif truth:
                fn += 1
        stats[i] = (tp, fp, fn)
    return stats


def _resample_evaluator(
    records: Sequence[PredictionRecord],
    metric_fn: Callable[[Sequence[PredictionRecord]], float],
) -> Callable[[np.ndarray], float]:
    """Per-record sufficient statistics make replicate evaluation a couple of
    integer reductions for the built-in metrics; both metrics are additive
    over records so the values are identical to calling metric_fn directly
    (covered by tests).  Unknown metrics fall back to the direct call."""
    target, kwargs = metric_fn, {}
    if isinstance(metric_fn, functools.partial):
        target, kwargs = metric_fn.func, metric_fn.keywords or {}

    if target is accuracy and not kwargs:
        correct = _accuracy_stats(records)

        def eval_accuracy(indices: np.ndarray) -> float:
            return int(correct[indices].sum()) / len(indices)

        return eval_accuracy

    if target is f1_multilabel and set(kwargs) <= {"threshold"}:
        stats = _f1_stats(records, kwargs.get("threshold", 0.5))

        def eval_f1(indices: np.ndarray) -> float:
            tp, fp, fn = (int(v) for v in stats[indices].sum(axis=0))
            denom = 2 * tp + fp + fn
            return 1.0 if denom == 0 else 2 * tp / denom

        return eval_f1

    def eval_direct(indices: np.ndarray) -> float:
        return metric_fn([records[i] for i in indices])

    return eval_direct


def metric_name(metric_fn: Callable) -> str:
    target = metric_fn.func if isinstance(metric_fn, functools.partial) else metric_fn
    if target is accuracy:
        return "accuracy"
    if target is f1_multilabel:
        return "micro_f1"
    return getattr(target, "__name__", "metric")


def bootstrap_ci(
    records: Sequence[PredictionRecord],
    metric_fn: Callable[[Sequence[PredictionRecord]], float],
    spec: BootstrapSpec,
) -> MetricReport:
    """Point estimate on the full set plus a seeded percentile bootstrap CI.

    Deterministic given (records, spec.seed); percentiles use linear
    interpolation between order statistics.
    """
    records = _validated(records)
    point = metric_fn(records)
    n = len(records)
    evaluate = _resample_evaluator(records, metric_fn)

    values = np.empty(spec.replicates, dtype=np.float64)
    for rep in range(spec.replicates):
        indices = _replicate_rng(spec.seed, rep).integers(0, n, size=n)
        try:
            values[rep] = evaluate(indices)
        except Exception as exc:
            raise RuntimeError(f"metric failed on bootstrap replicate {rep}") from exc

    low, high = np.percentile(values, spec.percentiles, method="linear")
    return MetricReport(
        metric=metric_name(metric_fn),
        point=float(point),
        ci_low=float(low),
        ci_high=float(high),
        n_test=n,
        bootstrap=spec,
    )
