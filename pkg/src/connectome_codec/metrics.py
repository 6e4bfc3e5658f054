"""Reconstruction metrics shared by training, evaluation, and latent search.

Edge metrics compare a probability (or score) matrix against a binary
target with the diagonal excluded throughout: diagonal entries are
forced to zero by construction and would only inflate the numbers.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _off_diagonal(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    return M[~np.eye(n, dtype=bool)]


def edge_auc(A_true: np.ndarray, scores: np.ndarray) -> float | None:
    """Rank-based AUC of score entries against binary targets, ties
    counted half, diagonal excluded.  None when the target has a single
    class (all edges or none)."""
    y = _off_diagonal(np.asarray(A_true)).astype(np.int64)
    s = _off_diagonal(np.asarray(scores)).astype(np.float64)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks realize the half-credit tie rule
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def edge_accuracy(A_true: np.ndarray, probs: np.ndarray, kappa: float = 0.5) -> float:
    """Fraction of off-diagonal entries matching after thresholding at kappa."""
    y = _off_diagonal(np.asarray(A_true)).astype(np.int64)
    pred = (_off_diagonal(np.asarray(probs)) >= kappa).astype(np.int64)
    return float(np.mean(pred == y))


def all_zeros_accuracy(A_true: np.ndarray) -> float:
    """Accuracy of the trivial no-edges predictor (the base rate)."""
    y = _off_diagonal(np.asarray(A_true)).astype(np.int64)
    return float(np.mean(y == 0))


def node_accuracy(labels_true: np.ndarray, labels_pred: np.ndarray) -> float:
    return float(np.mean(np.asarray(labels_true) == np.asarray(labels_pred)))


def node_macro_f1(labels_true: np.ndarray, labels_pred: np.ndarray, n_classes: int = 5) -> float:
    """Macro F1 over all classes; a class with no true and no predicted
    members contributes 0 (zero-division convention)."""
    t = np.asarray(labels_true)
    p = np.asarray(labels_pred)
    f1s = []
    for c in range(n_classes):
        tp = int(np.sum((t == c) & (p == c)))
        fp = int(np.sum((t != c) & (p == c)))
        fn = int(np.sum((t == c) & (p != c)))
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))
