"""Classification metrics: balanced accuracy, macro one-vs-rest ROC AUC
(Mann-Whitney rank statistic, ties count half), and fold aggregation into
"mean ± std" report rows (sample standard deviation, n-1)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


class MetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. absent class)."""


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """(K,K) counts; rows are true classes, columns predictions."""
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    if true.shape != pred.shape:
        raise ConfigError(f"length mismatch: {true.shape} vs {pred.shape}")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise MetricError(f"{name} labels outside [0, {num_classes})")
    mat = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(mat, (true, pred), 1)
    return mat


def balanced_accuracy(true: np.ndarray, pred: np.ndarray, num_classes: int) -> float:
    """Mean over classes of per-class recall; every class must appear in true."""
    mat = confusion_matrix(true, pred, num_classes)
    row_sums = mat.sum(axis=1)
    absent = np.flatnonzero(row_sums == 0)
    if absent.size:
        raise MetricError(
            f"recall undefined: class {absent[0]} absent from the true labels"
        )
    return float((np.diag(mat) / row_sums).mean())


def _midranks(values: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with ties sharing their midrank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def binary_auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Rank-statistic AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    n_pos, n_neg = len(pos_scores), len(neg_scores)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined without both positives and negatives")
    ranks = _midranks(np.concatenate([pos_scores, neg_scores]))
    pos_rank_sum = ranks[:n_pos].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_auc_ovr_macro(true: np.ndarray, scores: np.ndarray) -> float:
    """Per-class one-vs-rest binary AUC of its score column, macro averaged."""
    true = np.asarray(true, dtype=int)
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or len(true) != len(scores):
        raise ConfigError(
            f"scores must be (n,K) aligned with labels, got {scores.shape} for n={len(true)}"
        )
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores contain non-finite values")
    k = scores.shape[1]
    aucs = []
    for c in range(k):
        mask = true == c
        if not mask.any():
            raise MetricError(f"AUC undefined: class {c} absent from the true labels")
        aucs.append(binary_auc(scores[mask, c], scores[~mask, c]))
    return float(np.mean(aucs))


def aggregate_folds(values) -> tuple[float, float]:
    """Arithmetic mean and sample (n-1) standard deviation over folds."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise MetricError(
            f"standard deviation undefined for {len(values)} fold(s); need >= 2"
        )
    return float(values.mean()), float(values.std(ddof=1))


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


@dataclass(frozen=True)
class MetricsReport:
    """Per-fold balanced accuracy / AUC with their mean ± std aggregation."""

    bcc_per_fold: tuple[float, ...]
    auc_per_fold: tuple[float, ...]

    def __post_init__(self):
        for name, vals in (("bcc", self.bcc_per_fold), ("auc", self.auc_per_fold)):
            for v in vals:
                if not 0.0 <= v <= 1.0:
                    raise MetricError(f"{name} value {v} outside [0, 1]")

    @property
    def bcc(self) -> tuple[float, float]:
        return aggregate_folds(self.bcc_per_fold)

    @property
    def auc(self) -> tuple[float, float]:
        return aggregate_folds(self.auc_per_fold)

    def render(self) -> str:
        return (f"BCC {format_mean_std(*self.bcc)}  "
                f"AUC {format_mean_std(*self.auc)}")
