"""Area under the precision-recall curve (average precision) and helpers.

Average precision here is the threshold-sweep form: walk distinct scores in
descending order, treat each tied block as one threshold, and accumulate
precision-at-block weighted by the recall gained in that block. This matches
an exhaustive oracle exactly, including on ties.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricUndefined


def auprc(scores, labels) -> float:
    """Average precision of ``scores`` ranking the 0/1 ``labels``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricUndefined(f"scores {s.shape} and labels {y.shape} must be equal 1-d")
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == y.size:
        raise MetricUndefined("average precision needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    n = y.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        block_tp = int((y_sorted[i:j] == 1).sum())
        tp += block_tp
        seen = j
        if block_tp:
            ap += (block_tp / n_pos) * (tp / seen)
        i = j
    return ap


def macro_auprc(score_matrix, label_matrix) -> tuple[float, list[float | None], int]:
    """Per-class average precision, macro-averaged.

    Classes undefined on these labels (no positives or no negatives) are
    skipped; returns (mean, per-class list with None for skipped, n_skipped).
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise MetricUndefined("macro average precision needs matching 2-d matrices")
    per_class: list[float | None] = []
    values = []
    for c in range(scores.shape[1]):
        try:
            v = auprc(scores[:, c], labels[:, c])
        except MetricUndefined:
            per_class.append(None)
            continue
        per_class.append(v)
        values.append(v)
    if not values:
        raise MetricUndefined("no class has both positives and negatives")
    return float(np.mean(values)), per_class, per_class.count(None)


def task_auprc(task_kind: str, probs: np.ndarray, labels: np.ndarray) -> float:
    """Single AUPRC figure for any task kind.

    Binary scores directly; multiclass one-vs-rest macro over class
    probability columns; multilabel macro over label columns.
    """
    if task_kind == "binary":
        return auprc(probs, labels)
    if task_kind == "multiclass":
        n_classes = probs.shape[1]
        onehot = np.zeros_like(probs)
        onehot[np.arange(labels.shape[0]), np.asarray(labels, dtype=np.int64)] = 1
        return macro_auprc(probs, onehot)[0]
    return macro_auprc(probs, labels)[0]


def standard_error(values) -> float:
    """Sample standard deviation over the square root of the count."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))
