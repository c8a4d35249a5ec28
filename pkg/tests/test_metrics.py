"""Metric tests against hand computations and the pairwise-counting oracle."""

import numpy as np
import pytest
from helpers import brute_force_auc_ovr_macro, confusion_by_hand

from dermfuse.metrics import (
    MetricError,
    MetricsReport,
    aggregate_folds,
    balanced_accuracy,
    confusion_matrix,
    format_mean_std,
    roc_auc_ovr_macro,
)


class TestConfusionMatrix:
    def test_matches_hand_loop(self):
        rng = np.random.default_rng(0)
        true = rng.integers(0, 4, size=50)
        pred = rng.integers(0, 4, size=50)
        np.testing.assert_array_equal(
            confusion_matrix(true, pred, 4), confusion_by_hand(true, pred, 4)
        )

    def test_total_equals_samples(self):
        mat = confusion_matrix([0, 1, 2, 1], [0, 0, 2, 1], 3)
        assert mat.sum() == 4


class TestBalancedAccuracy:
    def test_perfect(self):
        assert balanced_accuracy([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_constant_predictor_on_balanced_data(self):
        true = np.repeat(np.arange(6), 10)
        pred = np.zeros(60, dtype=int)
        assert balanced_accuracy(true, pred, 6) == pytest.approx(1 / 6)

    def test_hand_computed_seven_twelfths(self):
        # confusion: class0 recall 1/2, class1 recall 2/3 -> (1/2 + 2/3)/2
        true = [0, 0, 1, 1, 1]
        pred = [0, 1, 1, 1, 0]
        assert balanced_accuracy(true, pred, 2) == pytest.approx(7 / 12)

    def test_absent_class_raises(self):
        with pytest.raises(MetricError, match="class 2 absent"):
            balanced_accuracy([0, 1], [0, 1], 3)

    def test_invariant_under_class_duplication(self):
        rng = np.random.default_rng(1)
        true = rng.integers(0, 3, size=30)
        true[:3] = [0, 1, 2]
        pred = rng.integers(0, 3, size=30)
        base = balanced_accuracy(true, pred, 3)
        dup_mask = true == 1
        true_dup = np.concatenate([true, np.repeat(true[dup_mask], 3)])
        pred_dup = np.concatenate([pred, np.repeat(pred[dup_mask], 3)])
        assert balanced_accuracy(true_dup, pred_dup, 3) == pytest.approx(base)

    def test_random_predictor_expectation(self):
        # mean over many trials within 3 standard errors of 1/K
        rng = np.random.default_rng(2)
        true = np.repeat(np.arange(4), [5, 17, 40, 8])
        vals = np.array([
            balanced_accuracy(true, rng.integers(0, 4, size=len(true)), 4)
            for _ in range(10_000)
        ])
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - 0.25) <= 3 * se


class TestRocAuc:
    def test_perfectly_ordered(self):
        true = np.array([0] * 5 + [1] * 5)
        scores = np.zeros((10, 2))
        scores[:5, 0], scores[5:, 1] = 1.0, 1.0
        assert roc_auc_ovr_macro(true, scores) == 1.0

    def test_all_ties_is_half(self):
        true = np.array([0, 0, 1, 1, 2, 2])
        scores = np.ones((6, 3))
        assert roc_auc_ovr_macro(true, scores) == pytest.approx(0.5)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            true = rng.integers(0, 3, size=40)
            true[:3] = [0, 1, 2]
            scores = rng.random((40, 3))
            if trial % 3 == 0:
                scores = np.round(scores, 1)  # force ties
            fast = roc_auc_ovr_macro(true, scores)
            slow = brute_force_auc_ovr_macro(true, scores)
            assert fast == pytest.approx(slow, abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(4)
        true = rng.integers(0, 3, size=30)
        true[:3] = [0, 1, 2]
        scores = rng.random((30, 3))
        base = roc_auc_ovr_macro(true, scores)
        transformed = np.exp(5 * scores) + 2
        assert roc_auc_ovr_macro(true, transformed) == base

    def test_reversed_scores_complement(self):
        rng = np.random.default_rng(5)
        true = rng.integers(0, 3, size=30)
        true[:3] = [0, 1, 2]
        scores = rng.standard_normal((30, 3))  # continuous: no ties
        assert roc_auc_ovr_macro(true, -scores) == pytest.approx(
            1 - roc_auc_ovr_macro(true, scores), abs=1e-12
        )

    def test_absent_class_raises(self):
        with pytest.raises(MetricError, match="class 2 absent"):
            roc_auc_ovr_macro(np.array([0, 1]), np.random.rand(2, 3))

    def test_non_finite_scores_raise(self):
        scores = np.array([[np.inf, 0.0], [0.0, 1.0]])
        with pytest.raises(MetricError, match="non-finite"):
            roc_auc_ovr_macro(np.array([0, 1]), scores)


class TestAggregation:
    def test_constant_folds(self):
        mean, std = aggregate_folds([0.8] * 5)
        assert (mean, std) == (0.8, 0.0)
        assert format_mean_std(mean, std) == "0.800 ± 0.000"

    def test_hand_computed_variance(self):
        vals = [0.794, 0.800, 0.806, 0.800, 0.800]
        mean, std = aggregate_folds(vals)
        # deviations (-.006, 0, .006, 0, 0): sum sq 7.2e-5, /4, sqrt
        assert mean == pytest.approx(0.800)
        assert std == pytest.approx(np.sqrt(7.2e-5 / 4))
        assert std == pytest.approx(0.0042, abs=5e-5)

    def test_render_format(self):
        assert format_mean_std(0.8, 0.006) == "0.800 ± 0.006"

    def test_single_fold_undefined(self):
        with pytest.raises(MetricError, match="1 fold"):
            aggregate_folds([0.8])

    def test_report_bounds_checked(self):
        with pytest.raises(MetricError, match="outside"):
            MetricsReport(bcc_per_fold=(0.5, 1.2), auc_per_fold=(0.5, 0.5))

    def test_report_render(self):
        report = MetricsReport(bcc_per_fold=(0.794, 0.800, 0.806, 0.800, 0.800),
                               auc_per_fold=(0.94, 0.94, 0.94, 0.94, 0.94))
        assert report.render() == "BCC 0.800 ± 0.004  AUC 0.940 ± 0.000"
