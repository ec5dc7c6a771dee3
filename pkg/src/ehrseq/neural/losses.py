"""Loss functions and prediction-side probability transforms.

Losses are fused tape ops with analytic gradients: composing them from
primitives would lose the log-sum-exp stabilization. Each returns the
mean over the batch as a scalar tensor.
"""

from __future__ import annotations

import numpy as np

from ..errors import LabelError, ShapeError
from . import tensor as T


def _as_labels(labels, shape, kind: str) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.shape != shape:
        raise ShapeError(f"{kind} labels shape {arr.shape}, expected {shape}")
    return arr


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(shifted.astype(np.float64))
    return ez / ez.sum(axis=-1, keepdims=True)


def _binary_ce(z: np.ndarray, y: np.ndarray):
    # loss = max(z,0) - z*y + log1p(exp(-|z|)), gradient = sigmoid(z) - y
    z64 = z.astype(np.float64)
    loss = np.maximum(z64, 0.0) - z64 * y + np.log1p(np.exp(-np.abs(z64)))
    return loss, sigmoid(z64) - y


def binary_cross_entropy(logits: T.Tensor, labels, pos_weight: float | None = None) -> T.Tensor:
    """Mean sigmoid cross-entropy; ``logits`` shape (n,), labels 0/1.

    ``pos_weight`` scales the positive-class terms (rare-event option).
    """
    y = _as_labels(labels, logits.data.shape, "binary").astype(np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise LabelError("binary labels must be 0 or 1")
    loss, dz = _binary_ce(logits.data, y)
    if pos_weight is not None:
        w = np.where(y == 1.0, float(pos_weight), 1.0)
        loss = loss * w
        dz = dz * w
    n = max(y.size, 1)

    def bwd(g, dst=logits):
        dst._accumulate((g * dz / n).astype(logits.data.dtype))

    return T._scalar_loss(float(loss.sum() / n), (logits,), bwd)


def multiclass_cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean softmax cross-entropy; ``logits`` shape (n, C), labels int in [0, C)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"multiclass logits must be 2-d, got {logits.data.shape}")
    n, c = logits.data.shape
    y = _as_labels(labels, (n,), "multiclass")
    if not np.issubdtype(y.dtype, np.integer):
        raise LabelError("multiclass labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise LabelError(f"multiclass label outside [0, {c})")
    p = softmax(logits.data)
    rows = np.arange(n)
    loss = -np.log(np.maximum(p[rows, y], 1e-300)).sum() / max(n, 1)
    dz = p.copy()
    dz[rows, y] -= 1.0

    def bwd(g, dst=logits):
        dst._accumulate((g * dz / max(n, 1)).astype(logits.data.dtype))

    return T._scalar_loss(float(loss), (logits,), bwd)


def multilabel_cross_entropy(logits: T.Tensor, labels) -> T.Tensor:
    """Mean over classes of per-class sigmoid cross-entropy, then over batch.

    ``logits`` shape (n, K), labels multi-hot (n, K).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"multilabel logits must be 2-d, got {logits.data.shape}")
    y = _as_labels(labels, logits.data.shape, "multilabel").astype(np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise LabelError("multilabel entries must be 0 or 1")
    loss, dz = _binary_ce(logits.data, y)
    denom = max(y.size, 1)

    def bwd(g, dst=logits):
        dst._accumulate((g * dz / denom).astype(logits.data.dtype))

    return T._scalar_loss(float(loss.sum() / denom), (logits,), bwd)
