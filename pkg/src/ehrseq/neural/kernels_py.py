"""Pure-numpy kernels: the reference implementation of the hot paths.

The compiled extension (``ehrseq.neural._kernels``) mirrors every function
here with identical signatures and semantics; the backend module picks one at
import time. All sequence work uses a packed layout: variable-length
sequences concatenated along axis 0 with int64 ``cu_seqlens`` boundaries
(cu[i]:cu[i+1] slices sequence i), so padding never enters the math.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def layernorm_fwd(x, gamma, beta, eps):
    """Row-wise layer norm. Returns (y, xhat, inv_std); the latter two feed backward."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gamma + beta, xhat, inv_std[..., 0]


def layernorm_bwd(dy, xhat, inv_std, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std[..., None] * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                               - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dgamma, dbeta


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, dy):
    x2 = x * x
    inner = _GELU_C * (x + _GELU_A * x * x2)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    local = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return dy * local


def attention_fwd(q, k, v, cu_seqlens, n_heads):
    """Packed variable-length multi-head self-attention forward.

    q/k/v: (total_tokens, d_model) with d_model = n_heads * d_head.
    Returns (out, probs) where probs is the concatenation of per-sequence
    (n_heads, len_i, len_i) attention matrices, flattened; backward re-slices
    it with the same cu_seqlens.
    """
    total, d_model = q.shape
    d_head = d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    out = np.empty_like(q)
    n_seq = len(cu_seqlens) - 1
    probs_size = 0
    for i in range(n_seq):
        L = int(cu_seqlens[i + 1] - cu_seqlens[i])
        probs_size += n_heads * L * L
    probs = np.empty(probs_size, dtype=q.dtype)
    offset = 0
    for i in range(n_seq):
        a, b = int(cu_seqlens[i]), int(cu_seqlens[i + 1])
        L = b - a
        qi = q[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        ki = k[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        vi = v[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        scores = np.matmul(qi, ki.transpose(0, 2, 1)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        probs[offset:offset + n_heads * L * L] = p.reshape(-1)
        offset += n_heads * L * L
        oi = np.matmul(p, vi)
        out[a:b] = oi.transpose(1, 0, 2).reshape(L, d_model)
    return out, probs


def attention_bwd(dout, q, k, v, probs, cu_seqlens, n_heads):
    total, d_model = q.shape
    d_head = d_model // n_heads
    scale = 1.0 / np.sqrt(d_head)
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    offset = 0
    n_seq = len(cu_seqlens) - 1
    for i in range(n_seq):
        a, b = int(cu_seqlens[i]), int(cu_seqlens[i + 1])
        L = b - a
        qi = q[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        ki = k[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        vi = v[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        doi = dout[a:b].reshape(L, n_heads, d_head).transpose(1, 0, 2)
        p = probs[offset:offset + n_heads * L * L].reshape(n_heads, L, L)
        offset += n_heads * L * L
        dvi = np.matmul(p.transpose(0, 2, 1), doi)
        dp = np.matmul(doi, vi.transpose(0, 2, 1))
        # softmax jacobian: ds = p * (dp - sum(dp * p))
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
        dqi = np.matmul(ds, ki) * scale
        dki = np.matmul(ds.transpose(0, 2, 1), qi) * scale
        dq[a:b] = dqi.transpose(1, 0, 2).reshape(L, d_model)
        dk[a:b] = dki.transpose(1, 0, 2).reshape(L, d_model)
        dv[a:b] = dvi.transpose(1, 0, 2).reshape(L, d_model)
    return dq, dk, dv


def embedding_bwd(ids, dy, n_rows):
    """Scatter-add gradient into an embedding table of n_rows rows."""
    dw = np.zeros((n_rows, dy.shape[-1]), dtype=dy.dtype)
    np.add.at(dw, ids, dy)
    return dw


def segment_mean_fwd(x, cu_seqlens):
    """Mean over each packed segment: (total, d) -> (n_seq, d)."""
    n_seq = len(cu_seqlens) - 1
    out = np.empty((n_seq, x.shape[1]), dtype=x.dtype)
    for i in range(n_seq):
        a, b = int(cu_seqlens[i]), int(cu_seqlens[i + 1])
        out[i] = x[a:b].mean(axis=0)
    return out


def segment_mean_bwd(dy, cu_seqlens, total):
    dx = np.empty((total, dy.shape[1]), dtype=dy.dtype)
    n_seq = len(cu_seqlens) - 1
    for i in range(n_seq):
        a, b = int(cu_seqlens[i]), int(cu_seqlens[i + 1])
        dx[a:b] = dy[i] / (b - a)
    return dx


def segment_sum_fwd(x, cu_seqlens):
    """Sum over each packed segment: (total, d) -> (n_seq, d). Empty segments give 0."""
    n_seq = len(cu_seqlens) - 1
    out = np.zeros((n_seq, x.shape[1]), dtype=x.dtype)
    for i in range(n_seq):
        a, b = int(cu_seqlens[i]), int(cu_seqlens[i + 1])
        if b > a:
            out[i] = x[a:b].sum(axis=0)
    return out


def segment_sum_bwd(dy, cu_seqlens, total):
    dx = np.empty((total, dy.shape[1]), dtype=dy.dtype)
    n_seq = len(cu_seqlens) - 1
    for i in range(n_seq):
        a, b = int(cu_seqlens[i]), int(cu_seqlens[i + 1])
        dx[a:b] = dy[i]
    return dx


def adamw_step(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """Decoupled-weight-decay Adam update, in place on param/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)
