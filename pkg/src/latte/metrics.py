"""Classification metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(p) != len(y):
        raise ValueError("predictions and labels differ in length")
    if len(y) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == y))


def auc(scores, labels) -> float:
    """Rank-based Mann-Whitney AUC; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    classes = set(np.unique(y).tolist())
    if not classes <= {0, 1}:
        raise ValueError("auc expects binary labels in {0, 1}")
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def softmax_scores(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
