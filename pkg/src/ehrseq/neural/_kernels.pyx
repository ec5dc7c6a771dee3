# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels mirroring ehrseq.neural.kernels_py function by function.

Same packed-sequence layout and the same signatures; dtype (float32/float64)
is dispatched through fused types. Single-threaded on purpose: each backend
is deterministic run to run, and the two agree within float tolerance.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

BACKEND_NAME = "compiled"

ctypedef fused floating:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layernorm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    inv_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] inv_std = inv_arr
    cdef Py_ssize_t i, j
    cdef double mean, var, diff, inv
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mean
            var += diff * diff
        var /= d
        inv = 1.0 / sqrt(var + eps)
        inv_std[i] = <floating> inv
        for j in range(d):
            xhat[i, j] = <floating> ((x[i, j] - mean) * inv)
            y[i, j] = <floating> (xhat[i, j] * gamma[j] + beta[j])
    return y_arr, xhat_arr, inv_arr


def layernorm_bwd(floating[:, ::1] dy, floating[:, ::1] xhat, floating[::1] inv_std,
                  floating[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgamma_arr = np.zeros(d, dtype=dtype)
    dbeta_arr = np.zeros(d, dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef floating[::1] dgamma = dgamma_arr
    cdef floating[::1] dbeta = dbeta_arr
    cdef Py_ssize_t i, j
    cdef double mean_dxhat, mean_dxhat_xhat, g
    for i in range(n):
        mean_dxhat = 0.0
        mean_dxhat_xhat = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            mean_dxhat += g
            mean_dxhat_xhat += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        mean_dxhat /= d
        mean_dxhat_xhat /= d
        for j in range(d):
            dx[i, j] = <floating> (inv_std[i] * (dy[i, j] * gamma[j] - mean_dxhat
                                                 - xhat[i, j] * mean_dxhat_xhat))
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef Py_ssize_t i, j
    cdef double v
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            y[i, j] = <floating> (0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))
    return y_arr


def gelu_bwd(floating[:, ::1] x, floating[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j
    cdef double v, t, sech2, local
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = tanh(GELU_C * (v + GELU_A * v * v * v))
            sech2 = 1.0 - t * t
            local = 0.5 * (1.0 + t) + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            dx[i, j] = <floating> (dy[i, j] * local)
    return dx_arr


def attention_fwd(floating[:, ::1] q, floating[:, ::1] k, floating[:, ::1] v,
                  long long[::1] cu_seqlens, int n_heads):
    cdef Py_ssize_t total = q.shape[0], d_model = q.shape[1]
    cdef Py_ssize_t d_head = d_model // n_heads
    cdef double scale = 1.0 / sqrt(<double> d_head)
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((total, d_model), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1
    cdef Py_ssize_t probs_size = 0, i, L
    for i in range(n_seq):
        L = cu_seqlens[i + 1] - cu_seqlens[i]
        probs_size += n_heads * L * L
    probs_arr = np.empty(probs_size, dtype=dtype)
    cdef floating[::1] probs = probs_arr
    cdef Py_ssize_t offset = 0, a, h, r, c, t, base
    cdef double s, row_max, row_sum, acc
    for i in range(n_seq):
        a = cu_seqlens[i]
        L = cu_seqlens[i + 1] - a
        for h in range(n_heads):
            base = offset + h * L * L
            for r in range(L):
                row_max = -1e300
                for c in range(L):
                    s = 0.0
                    for t in range(d_head):
                        s += q[a + r, h * d_head + t] * k[a + c, h * d_head + t]
                    s *= scale
                    probs[base + r * L + c] = <floating> s
                    if s > row_max:
                        row_max = s
                row_sum = 0.0
                for c in range(L):
                    s = exp(probs[base + r * L + c] - row_max)
                    probs[base + r * L + c] = <floating> s
                    row_sum += s
                for c in range(L):
                    probs[base + r * L + c] = <floating> (probs[base + r * L + c] / row_sum)
                for t in range(d_head):
                    acc = 0.0
                    for c in range(L):
                        acc += probs[base + r * L + c] * v[a + c, h * d_head + t]
                    out[a + r, h * d_head + t] = <floating> acc
        offset += n_heads * L * L
    return out_arr, probs_arr


def attention_bwd(floating[:, ::1] dout, floating[:, ::1] q, floating[:, ::1] k,
                  floating[:, ::1] v, floating[::1] probs, long long[::1] cu_seqlens,
                  int n_heads):
    cdef Py_ssize_t total = q.shape[0], d_model = q.shape[1]
    cdef Py_ssize_t d_head = d_model // n_heads
    cdef double scale = 1.0 / sqrt(<double> d_head)
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dq_arr = np.zeros((total, d_model), dtype=dtype)
    dk_arr = np.zeros((total, d_model), dtype=dtype)
    dv_arr = np.zeros((total, d_model), dtype=dtype)
    cdef floating[:, ::1] dq = dq_arr
    cdef floating[:, ::1] dk = dk_arr
    cdef floating[:, ::1] dv = dv_arr
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1
    cdef Py_ssize_t offset = 0, i, a, L, h, r, c, t, base
    cdef double dp, row_dot, ds, acc
    for i in range(n_seq):
        a = cu_seqlens[i]
        L = cu_seqlens[i + 1] - a
        for h in range(n_heads):
            base = offset + h * L * L
            for r in range(L):
                # dv += p^T dout ; dp = dout v^T
                row_dot = 0.0
                for c in range(L):
                    dp = 0.0
                    for t in range(d_head):
                        dp += dout[a + r, h * d_head + t] * v[a + c, h * d_head + t]
                        dv[a + c, h * d_head + t] += probs[base + r * L + c] * dout[a + r, h * d_head + t]
                    row_dot += dp * probs[base + r * L + c]
                    # stash dp where it is needed next; reuse a local pass below
                    # (recomputed to avoid an L-sized scratch allocation)
                for c in range(L):
                    dp = 0.0
                    for t in range(d_head):
                        dp += dout[a + r, h * d_head + t] * v[a + c, h * d_head + t]
                    ds = probs[base + r * L + c] * (dp - row_dot) * scale
                    for t in range(d_head):
                        dq[a + r, h * d_head + t] += ds * k[a + c, h * d_head + t]
                        dk[a + c, h * d_head + t] += ds * q[a + r, h * d_head + t]
        offset += n_heads * L * L
    return dq_arr, dk_arr, dv_arr


def embedding_bwd(long long[::1] ids, floating[:, ::1] dy, Py_ssize_t n_rows):
    cdef Py_ssize_t n = ids.shape[0], d = dy.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dw_arr = np.zeros((n_rows, d), dtype=dtype)
    cdef floating[:, ::1] dw = dw_arr
    cdef Py_ssize_t i, j, row
    for i in range(n):
        row = ids[i]
        for j in range(d):
            dw[row, j] += dy[i, j]
    return dw_arr


def segment_mean_fwd(floating[:, ::1] x, long long[::1] cu_seqlens):
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1, d = x.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n_seq, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r, a, b
    cdef double acc
    for i in range(n_seq):
        a = cu_seqlens[i]
        b = cu_seqlens[i + 1]
        for j in range(d):
            acc = 0.0
            for r in range(a, b):
                acc += x[r, j]
            out[i, j] = <floating> (acc / (b - a))
    return out_arr


def segment_mean_bwd(floating[:, ::1] dy, long long[::1] cu_seqlens, Py_ssize_t total):
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1, d = dy.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.empty((total, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, r, a, b
    for i in range(n_seq):
        a = cu_seqlens[i]
        b = cu_seqlens[i + 1]
        for r in range(a, b):
            for j in range(d):
                dx[r, j] = <floating> (dy[i, j] / (b - a))
    return dx_arr


def segment_sum_fwd(floating[:, ::1] x, long long[::1] cu_seqlens):
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1, d = x.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.zeros((n_seq, d), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r, a, b
    for i in range(n_seq):
        a = cu_seqlens[i]
        b = cu_seqlens[i + 1]
        for r in range(a, b):
            for j in range(d):
                out[i, j] += x[r, j]
    return out_arr


def segment_sum_bwd(floating[:, ::1] dy, long long[::1] cu_seqlens, Py_ssize_t total):
    cdef Py_ssize_t n_seq = cu_seqlens.shape[0] - 1, d = dy.shape[1]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.empty((total, d), dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, r, a, b
    for i in range(n_seq):
        a = cu_seqlens[i]
        b = cu_seqlens[i + 1]
        for r in range(a, b):
            for j in range(d):
                dx[r, j] = dy[i, j]
    return dx_arr


def adamw_step(floating[::1] param, floating[::1] grad, floating[::1] m, floating[::1] v,
               long long step, double lr, double beta1, double beta2, double eps,
               double weight_decay):
    cdef Py_ssize_t n = param.shape[0]
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef Py_ssize_t i
    cdef double g, mi, vi
    for i in range(n):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = <floating> mi
        v[i] = <floating> vi
        param[i] = <floating> (param[i] - lr * ((mi / bc1) / (sqrt(vi / bc2) + eps)
                                                + weight_decay * param[i]))
    return None
