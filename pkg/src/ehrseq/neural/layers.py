"""Transformer building blocks over the packed-sequence tape.

Everything consumes the packed layout (rows = concatenated sequences,
``cu_seqlens`` = boundaries). Position embeddings restart at every sequence start.
Pre-norm residual blocks; GELU feed-forward; learned positions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from . import tensor as T

_op_ids = itertools.count(1)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    dropout: float
    max_len: int

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.layers < 1 or self.max_len < 1:
            raise ConfigError("layers and max_len must be positive")

    def to_dict(self) -> dict:
        return {"layers": self.layers, "model_dim": self.model_dim, "heads": self.heads,
                "ffn_dim": self.ffn_dim, "dropout": self.dropout, "max_len": self.max_len}

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        return cls(**doc)


def _init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(T.state.dtype)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int):
        self.w = T.parameter(_init_normal(rng, (d_in, d_out)))
        self.b = T.parameter(np.zeros(d_out, dtype=T.state.dtype))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self) -> dict:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(d, dtype=T.state.dtype))
        self.beta = T.parameter(np.zeros(d, dtype=T.state.dtype))
        self.eps = eps

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layernorm(x, self.gamma, self.beta, self.eps)

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


class Embedding:
    def __init__(self, rng, n_rows: int, d: int):
        self.table = T.parameter(_init_normal(rng, (n_rows, d)))

    def __call__(self, ids: np.ndarray) -> T.Tensor:
        return T.embedding(self.table, ids)

    def params(self) -> dict:
        return {"table": self.table}


class Dropout:
    def __init__(self, rate: float):
        self.rate = rate
        self.op_id = next(_op_ids)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.dropout(x, self.rate, self.op_id)


class SelfAttention:
    def __init__(self, rng, d: int, heads: int):
        self.heads = heads
        self.q = Linear(rng, d, d)
        self.k = Linear(rng, d, d)
        self.v = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def __call__(self, x: T.Tensor, cu: np.ndarray) -> T.Tensor:
        attended = T.varlen_attention(self.q(x), self.k(x), self.v(x), cu, self.heads)
        return self.out(attended)

    def params(self) -> dict:
        out = {}
        for name, sub in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            for k, p in sub.params().items():
                out[f"{name}.{k}"] = p
        return out


class EncoderLayer:
    def __init__(self, rng, cfg: EncoderConfig):
        self.norm1 = LayerNorm(cfg.model_dim)
        self.attn = SelfAttention(rng, cfg.model_dim, cfg.heads)
        self.drop1 = Dropout(cfg.dropout)
        self.norm2 = LayerNorm(cfg.model_dim)
        self.ffn_in = Linear(rng, cfg.model_dim, cfg.ffn_dim)
        self.ffn_out = Linear(rng, cfg.ffn_dim, cfg.model_dim)
        self.drop2 = Dropout(cfg.dropout)

    def __call__(self, x: T.Tensor, cu: np.ndarray) -> T.Tensor:
        x = T.add(x, self.drop1(self.attn(self.norm1(x), cu)))
        x = T.add(x, self.drop2(self.ffn_out(T.gelu(self.ffn_in(self.norm2(x))))))
        return x

    def params(self) -> dict:
        out = {}
        for name, sub in (("norm1", self.norm1), ("attn", self.attn), ("norm2", self.norm2),
                          ("ffn_in", self.ffn_in), ("ffn_out", self.ffn_out)):
            for k, p in sub.params().items():
                out[f"{name}.{k}"] = p
        return out


def positions_for(cu: np.ndarray) -> np.ndarray:
    """Per-token position ids restarting at every sequence boundary."""
    lengths = np.diff(cu)
    if len(lengths) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])


class TransformerEncoder:
    """Pre-norm encoder over packed sequences; adds learned positions itself."""

    def __init__(self, rng, cfg: EncoderConfig):
        self.cfg = cfg
        self.positions = Embedding(rng, cfg.max_len, cfg.model_dim)
        self.input_drop = Dropout(cfg.dropout)
        self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(cfg.model_dim)

    def __call__(self, x: T.Tensor, cu: np.ndarray) -> T.Tensor:
        lengths = np.diff(cu)
        if len(lengths) and lengths.max() > self.cfg.max_len:
            raise ShapeError(
                f"sequence length {int(lengths.max())} exceeds max_len {self.cfg.max_len}")
        h = T.add(x, self.positions(positions_for(cu)))
        h = self.input_drop(h)
        for layer in self.layers:
            h = layer(h, cu)
        return self.final_norm(h)

    def params(self) -> dict:
        out = {f"pos.{k}": p for k, p in self.positions.params().items()}
        for i, layer in enumerate(self.layers):
            for k, p in layer.params().items():
                out[f"layer{i}.{k}"] = p
        for k, p in self.final_norm.params().items():
            out[f"final_norm.{k}"] = p
        return out


def count_parameters(params: dict) -> int:
    return sum(int(np.prod(p.data.shape)) for p in params.values())
