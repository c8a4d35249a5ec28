"""Shared test oracles, independent of the library paths they check."""

import numpy as np


def nearest_centroid_bcc(features, labels, train_idx, val_idx, k):
    """Classify by nearest class mean (plain numpy, no model code)."""
    features = features.reshape(len(features), -1)
    centroids = np.stack([
        features[train_idx][labels[train_idx] == c].mean(axis=0) for c in range(k)
    ])
    dists = ((features[val_idx][:, None, :] - centroids[None]) ** 2).sum(axis=2)
    preds = dists.argmin(axis=1)
    true = labels[val_idx]
    recalls = [(preds[true == c] == c).mean() for c in range(k) if (true == c).any()]
    return float(np.mean(recalls))


def brute_force_auc_ovr_macro(true, scores):
    """Pairwise-counting AUC oracle: concordant pairs + half ties."""
    true = np.asarray(true)
    scores = np.asarray(scores)
    k = scores.shape[1]
    aucs = []
    for c in range(k):
        pos = scores[true == c, c]
        neg = scores[true != c, c]
        total = 0.0
        for p in pos:
            for q in neg:
                if p > q:
                    total += 1.0
                elif p == q:
                    total += 0.5
        aucs.append(total / (len(pos) * len(neg)))
    return float(np.mean(aucs))


def confusion_by_hand(true, pred, k):
    mat = np.zeros((k, k), dtype=int)
    for t, p in zip(true, pred):
        mat[t, p] += 1
    return mat
