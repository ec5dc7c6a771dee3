"""Adam with decoupled weight decay over a named parameter dict."""

from __future__ import annotations

import numpy as np

from ..errors import NumericsError
from . import tensor as T
from .backend import kernels


class AdamW:
    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if T.state.checked and not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient for parameter {name}")
            kernels.adamw_step(p.data.reshape(-1), p.grad.reshape(-1).astype(p.data.dtype),
                               self._m[name].reshape(-1), self._v[name].reshape(-1),
                               self.step_count, self.lr, self.beta1, self.beta2,
                               self.eps, self.weight_decay)
