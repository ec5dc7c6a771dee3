"""Tape-based reverse-mode autodiff over numpy arrays.

Coarse-grained ops only: each forward op records a closure that routes the
output gradient to its inputs, and ``Tensor.backward`` replays the tape in
reverse topological order. Heavy inner loops (attention, layer norm, GELU,
scatter-add, segment pooling) go through the selected kernel backend; matrix
multiplies stay on numpy/BLAS.

Training runs in float32; gradient checking swaps the engine to float64 via
``use_dtype``. ``checked`` mode validates every op output and raises
NumericsError on the first non-finite value.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from ..errors import NumericsError, ShapeError, StateError
from .backend import kernels


class EngineState(threading.local):
    """Per-thread engine switches (dtype, checked mode, dropout control).

    Thread-local so seed-parallel training runs cannot interfere; each new
    thread starts from the defaults below.
    """

    def __init__(self):
        self.dtype = np.float32
        self.checked = False
        self.training = False
        self.dropout_seed = 0
        self.dropout_step = 0


state = EngineState()


@contextmanager
def use_dtype(dtype):
    prev = state.dtype
    state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        state.dtype = prev


@contextmanager
def checked_mode(enabled: bool = True):
    prev = state.checked
    state.checked = enabled
    try:
        yield
    finally:
        state.checked = prev


@contextmanager
def training_mode(enabled: bool = True):
    prev = state.training
    state.training = enabled
    try:
        yield
    finally:
        state.training = prev


def _check(name: str, arr: np.ndarray) -> None:
    if state.checked and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values out of op {name}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        self.data = np.asarray(data, dtype=state.dtype) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; fills ``grad`` on the tape."""
        if self.data.size != 1:
            raise StateError("backward requires a scalar loss")
        if self._bwd is None and not self._parents:
            raise StateError("backward before any traced forward op")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=state.dtype), requires_grad=True)


def _traced(out_data, parents, bwd, name) -> Tensor:
    _check(name, out_data)
    if any(p.requires_grad or p._parents for p in parents):
        out = Tensor(out_data, _parents=tuple(parents), _bwd=None)
        out._bwd = bwd
        return out
    return Tensor(out_data)


def _scalar_loss(value: float, parents, bwd) -> Tensor:
    """Entry point for fused loss ops: wrap a python float as a 0-d node."""
    return _traced(np.asarray(value, dtype=np.float64), parents, bwd, "loss")


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        ga = g if a.data.shape == g.shape else _unbroadcast(g, a.data.shape)
        gb = g if b.data.shape == g.shape else _unbroadcast(g, b.data.shape)
        a._accumulate(ga)
        b._accumulate(gb)

    return _traced(out, (a, b), bwd, "add")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def mul_array(a: Tensor, arr: np.ndarray, name: str = "mul_array") -> Tensor:
    """Elementwise multiply by a constant array (dropout masks, scalings)."""
    out = a.data * arr

    def bwd(g):
        a._accumulate(g * arr)

    return _traced(out, (a,), bwd, name)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise tensor product; shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul {a.data.shape} * {b.data.shape}")
    out = a.data * b.data

    def bwd(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _traced(out, (a, b), bwd, "mul")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return _traced(out, (a,), bwd, "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _traced(out, (a, b), bwd, "matmul")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding id out of range")
    out = table.data[ids]

    def bwd(g):
        table._accumulate(kernels.embedding_bwd(ids, np.ascontiguousarray(g), table.data.shape[0]))

    return _traced(out, (table,), bwd, "embedding")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    out = x.data[idx]

    def bwd(g):
        x._accumulate(kernels.embedding_bwd(idx, np.ascontiguousarray(g), x.data.shape[0]))

    return _traced(out, (x,), bwd, "gather_rows")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    y, xhat, inv_std = kernels.layernorm_fwd(
        np.ascontiguousarray(x.data), gamma.data, beta.data, eps)

    def bwd(g):
        dx, dgamma, dbeta = kernels.layernorm_bwd(
            np.ascontiguousarray(g), xhat, inv_std, gamma.data)
        x._accumulate(dx)
        gamma._accumulate(dgamma)
        beta._accumulate(dbeta)

    return _traced(y, (x, gamma, beta), bwd, "layernorm")


def gelu(x: Tensor) -> Tensor:
    xc = np.ascontiguousarray(x.data)
    y = kernels.gelu_fwd(xc)

    def bwd(g):
        x._accumulate(kernels.gelu_bwd(xc, np.ascontiguousarray(g)))

    return _traced(y, (x,), bwd, "gelu")


def varlen_attention(q: Tensor, k: Tensor, v: Tensor, cu_seqlens: np.ndarray,
                     n_heads: int) -> Tensor:
    cu = np.ascontiguousarray(cu_seqlens, dtype=np.int64)
    qc = np.ascontiguousarray(q.data)
    kc = np.ascontiguousarray(k.data)
    vc = np.ascontiguousarray(v.data)
    out, probs = kernels.attention_fwd(qc, kc, vc, cu, n_heads)

    def bwd(g):
        dq, dk, dv = kernels.attention_bwd(np.ascontiguousarray(g), qc, kc, vc,
                                           probs, cu, n_heads)
        q._accumulate(dq)
        k._accumulate(dk)
        v._accumulate(dv)

    return _traced(out, (q, k, v), bwd, "varlen_attention")


def segment_mean(x: Tensor, cu_seqlens: np.ndarray) -> Tensor:
    cu = np.ascontiguousarray(cu_seqlens, dtype=np.int64)
    if len(cu) < 2 or np.any(np.diff(cu) <= 0):
        raise ShapeError("segment_mean requires non-empty segments")
    total = x.data.shape[0]
    out = kernels.segment_mean_fwd(np.ascontiguousarray(x.data), cu)

    def bwd(g):
        x._accumulate(kernels.segment_mean_bwd(np.ascontiguousarray(g), cu, total))

    return _traced(out, (x,), bwd, "segment_mean")


def segment_sum(x: Tensor, cu_seqlens: np.ndarray) -> Tensor:
    cu = np.ascontiguousarray(cu_seqlens, dtype=np.int64)
    total = x.data.shape[0]
    out = kernels.segment_sum_fwd(np.ascontiguousarray(x.data), cu)

    def bwd(g):
        x._accumulate(kernels.segment_sum_bwd(np.ascontiguousarray(g), cu, total))

    return _traced(out, (x,), bwd, "segment_sum")


def dropout(x: Tensor, rate: float, op_id: int) -> Tensor:
    """Inverted dropout with a counter-based generator.

    The mask depends only on (seed, step, op_id, shape), never on call order,
    so replays are bit-identical.
    """
    if not state.training or rate <= 0.0:
        return x
    key = np.array([state.dropout_seed, (state.dropout_step << 20) | op_id],
                   dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul_array(x, mask, "dropout")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(g):
        x._accumulate(np.full_like(x.data, g / n))

    return _traced(out, (x,), bwd, "mean_all")
