import functools
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsxfer import (
    BootstrapSpec,
    MetricError,
    MetricReport,
    PredictionRecord,
    accuracy,
    bootstrap_ci,
    f1_multilabel,
)


def rec(scores, truths, rid=""):
    return PredictionRecord(
        scores=tuple(float(s) for s in scores),
        true_labels=frozenset(truths),
        example_id=rid,
    )


# ---------------------------------------------------------------------------
# Independent brute-force reimplementations (kept deliberately primitive).
# ---------------------------------------------------------------------------


def brute_accuracy(records):
    hits = 0
    for r in records:
        best_idx = 0
        best = r.scores[0]
        for i, s in enumerate(r.scores):
            if s > best:
                best = s
                best_idx = i
        (true,) = tuple(r.true_labels)
        if best_idx == true:
            hits += 1
    return hits / len(records)


def brute_f1(records, threshold=0.5):
    tp = fp = fn = 0
    for r in records:
        for c in range(len(r.scores)):
            pred = r.scores[c] > threshold
            truth = c in r.true_labels
            if pred and truth:
                tp += 1
            if pred and not truth:
                fp += 1
            if (not pred) and truth:
                fn += 1
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


class TestAccuracy:
    def test_all_correct(self):
        records = [rec([0.1, 0.9], [1]), rec([0.8, 0.2], [0])]
        assert accuracy(records) == 1.0

    def test_three_of_four(self):
        records = [
            rec([1.0, 0.0], [0]),
            rec([1.0, 0.0], [0]),
            rec([0.0, 1.0], [1]),
            rec([1.0, 0.0], [1]),  # wrong
        ]
        assert accuracy(records) == 0.75

    def test_empty_errors(self):
        with pytest.raises(MetricError, match="empty"):
            accuracy([])

    def test_tie_breaks_to_lowest_index(self):
        assert accuracy([rec([0.5, 0.5, 0.5], [0])]) == 1.0
        assert accuracy([rec([0.5, 0.5, 0.5], [2])]) == 0.0

    def test_multilabel_record_rejected(self):
        with pytest.raises(MetricError, match="single-label"):
            accuracy([rec([0.5, 0.5], [0, 1])])

    def test_inconsistent_widths_rejected(self):
        with pytest.raises(MetricError, match="scores"):
            accuracy([rec([0.1, 0.9], [1]), rec([0.1, 0.2, 0.7], [2])])


class TestF1Multilabel:
    def test_perfect(self):
        records = [rec([0.9, 0.1], [0]), rec([0.2, 0.8], [1])]
        assert f1_multilabel(records) == 1.0

    def test_hand_counted_two_thirds(self):
        # tp=2, fp=1, fn=1 -> 2*2 / (2*2 + 1 + 1) = 0.6667
        records = [
            rec([0.9, 0.8], [0]),      # tp on 0, fp on 1
            rec([0.9, 0.1], [0, 1]),   # tp on 0, fn on 1
        ]
        assert f1_multilabel(records) == pytest.approx(2 * 2 / (2 * 2 + 1 + 1))

    def test_all_scores_below_threshold(self):
        records = [rec([0.3, 0.5], [0]), rec([0.1, 0.2], [1])]
        assert f1_multilabel(records) == 0.0

    def test_exact_threshold_is_negative(self):
        assert f1_multilabel([rec([0.5], [0])]) == 0.0
        assert f1_multilabel([rec([0.5000001], [0])]) == 1.0

    def test_empty_errors(self):
        with pytest.raises(MetricError, match="empty"):
            f1_multilabel([])

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=10_000),
        n=st.integers(min_value=1, max_value=12),
        c=st.integers(min_value=1, max_value=5),
        gain=st.floats(min_value=0.05, max_value=0.45),
    )
    def test_monotone_transform_invariance(self, seed, n, c, gain):
        rng = np.random.default_rng(seed)
        records = []
        for i in range(n):
            truths = set(int(v) for v in rng.choice(c, size=rng.integers(1, c + 1), replace=False))
            records.append(rec(rng.random(c), truths, str(i)))
        # Strictly monotone and fixes the decision boundary at 0.5.
        transformed = [
            rec([0.5 + gain * math.tanh(4.0 * (s - 0.5)) for s in r.scores], r.true_labels)
            for r in records
        ]
        assert f1_multilabel(records) == f1_multilabel(transformed)


class TestBruteForceEquivalence:
    def test_accuracy_full_enumeration_two_examples(self):
        # All argmax outcomes incl. tie patterns, all truth assignments.
        score_patterns = [
            (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0),
            (0.5, 0.5, 0.0), (0.0, 0.5, 0.5), (0.3, 0.3, 0.3),
        ]
        per_example = [
            (scores, truth) for scores in score_patterns for truth in range(3)
        ]
        for combo in itertools.product(per_example, repeat=2):
            records = [rec(scores, [truth]) for scores, truth in combo]
            assert accuracy(records) == brute_accuracy(records)

    def test_f1_full_enumeration_two_examples(self):
        truths = [t for r in range(1, 4) for t in itertools.combinations(range(3), r)]
        decisions = list(itertools.product([0.1, 0.9], repeat=3))
        per_example = [(d, t) for d in decisions for t in truths]
        for combo in itertools.product(per_example, repeat=2):
            records = [rec(scores, truth) for scores, truth in combo]
            assert f1_multilabel(records) == brute_f1(records)

    @settings(max_examples=80, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=100_000))
    def test_random_agreement(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 20))
        c = int(rng.integers(1, 6))
        single = [rec(rng.random(c), [int(rng.integers(c))], str(i)) for i in range(n)]
        assert accuracy(single) == brute_accuracy(single)
        multi = []
        for i in range(n):
            k = int(rng.integers(1, c + 1))
            multi.append(rec(rng.random(c), rng.choice(c, size=k, replace=False).tolist()))
        assert f1_multilabel(multi) == brute_f1(multi)


class TestBootstrap:
    def make_records(self, seed, n=60, p=0.8):
        rng = np.random.default_rng(seed)
        records = []
        for i in range(n):
            correct = rng.random() < p
            records.append(rec([1.0, 0.0] if correct else [0.0, 1.0], [0], str(i)))
        return records

    def test_deterministic_per_seed(self):
        records = self.make_records(0)
        a = bootstrap_ci(records, accuracy, BootstrapSpec(replicates=200, seed=9))
        b = bootstrap_ci(records, accuracy, BootstrapSpec(replicates=200, seed=9))
        c = bootstrap_ci(records, accuracy, BootstrapSpec(replicates=200, seed=10))
        assert (a.point, a.ci_low, a.ci_high) == (b.point, b.ci_low, b.ci_high)
        assert (a.ci_low, a.ci_high) != (c.ci_low, c.ci_high)

    def test_degenerate_all_correct(self):
        records = [rec([1.0, 0.0], [0], str(i)) for i in range(25)]
        report = bootstrap_ci(records, accuracy, BootstrapSpec(seed=4))
        assert (report.point, report.ci_low, report.ci_high) == (1.0, 1.0, 1.0)

    def test_fast_path_equals_direct_evaluation(self):
        records = self.make_records(3, n=40)
        spec = BootstrapSpec(replicates=150, seed=21)
        fast = bootstrap_ci(records, accuracy, spec)
        slow = bootstrap_ci(records, lambda rs: accuracy(rs), spec)
        assert (fast.ci_low, fast.ci_high) == (slow.ci_low, slow.ci_high)

    def test_fast_path_equals_direct_evaluation_f1(self):
        rng = np.random.default_rng(8)
        records = [
            rec(rng.random(4), rng.choice(4, size=int(rng.integers(1, 5)), replace=False).tolist(), str(i))
            for i in range(30)
        ]
        spec = BootstrapSpec(replicates=150, seed=2)
        fast = bootstrap_ci(records, f1_multilabel, spec)
        slow = bootstrap_ci(records, lambda rs: f1_multilabel(rs), spec)
        assert (fast.ci_low, fast.ci_high) == (slow.ci_low, slow.ci_high)
        custom = bootstrap_ci(records, functools.partial(f1_multilabel, threshold=0.3), spec)
        custom_slow = bootstrap_ci(records, lambda rs: f1_multilabel(rs, threshold=0.3), spec)
        assert (custom.ci_low, custom.ci_high) == (custom_slow.ci_low, custom_slow.ci_high)

    def test_metric_failure_carries_replicate_index(self):
        records = self.make_records(0, n=30)

        def picky(rs):
            # Fine on the full set, blows up on any resample with duplicates.
            ids = [r.example_id for r in rs]
            if len(set(ids)) != len(ids):
                raise ZeroDivisionError("duplicate example")
            return 1.0

        with pytest.raises(RuntimeError, match=r"replicate \d+"):
            bootstrap_ci(records, picky, BootstrapSpec(replicates=3, seed=0))

    def test_ci_width_shrinks_with_n(self):
        # Median CI width at n=1000 below the median width at n=100 over 50
        # seeded trials of i.i.d. Bernoulli correctness.
        widths = {100: [], 1000: []}
        for n in widths:
            for trial in range(50):
                rng = np.random.default_rng(1000 + trial)
                records = [
                    rec([1.0, 0.0] if rng.random() < 0.85 else [0.0, 1.0], [0], str(i))
                    for i in range(n)
                ]
                report = bootstrap_ci(records, accuracy, BootstrapSpec(seed=trial))
                widths[n].append(report.ci_high - report.ci_low)
        assert np.median(widths[1000]) < np.median(widths[100])

    def test_report_format_matches_table_style(self):
        report = MetricReport(
            metric="micro_f1", point=0.9241, ci_low=0.9227, ci_high=0.9254, n_test=21833
        )
        assert report.format_percent() == "92.41 (92.27, 92.54)"

    def test_report_round_trip(self):
        report = MetricReport(
            metric="accuracy", point=0.5, ci_low=0.4, ci_high=0.6, n_test=10,
            bootstrap=BootstrapSpec(replicates=77, seed=5),
        )
        again = MetricReport.from_dict(report.to_dict())
        assert again == report

    def test_spec_validation(self):
        with pytest.raises(MetricError):
            BootstrapSpec(replicates=0)
        with pytest.raises(MetricError):
            BootstrapSpec(percentiles=(97.5, 2.5))
        with pytest.raises(MetricError):
            MetricReport(metric="x", point=0.5, ci_low=0.6, ci_high=0.4, n_test=1)
        with pytest.raises(MetricError):
            MetricReport(metric="x", point=1.5, ci_low=0.5, ci_high=0.5, n_test=1)

    def test_coverage_smoke(self):
        # Light version of the Monte-Carlo coverage study (full run lives in
        # the acceptance suite): nominal 95% interval should cover p=0.9
        # most of the time.
        covered = 0
        sims = 60
        for sim in range(sims):
            rng = np.random.default_rng(5000 + sim)
            records = [
                rec([1.0, 0.0] if rng.random() < 0.9 else [0.0, 1.0], [0], str(i))
                for i in range(200)
            ]
            report = bootstrap_ci(records, accuracy, BootstrapSpec(seed=sim))
            if report.ci_low <= 0.9 <= report.ci_high:
                covered += 1
        assert covered / sims > 0.85
