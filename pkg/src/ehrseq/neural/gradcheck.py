"""Central finite-difference oracle for the tape's analytic gradients.

Run under ``use_dtype(np.float64)`` with float64 parameters: float32 has
too little headroom for step 1e-5. The relative error uses a small-magnitude
floor so finite-difference roundoff on near-zero gradients does not register
as disagreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_STEP = 1e-5
REL_TOLERANCE = 1e-5
_MAGNITUDE_FLOOR = 1e-3


@dataclass
class GradCheckResult:
    max_rel_err: float
    n_checked: int
    worst: tuple[str, int, float, float]

    @property
    def ok(self) -> bool:
        return self.max_rel_err < REL_TOLERANCE


def finite_difference_check(loss_fn, params: dict, step: float = DEFAULT_STEP,
                            samples_per_tensor: int = 4, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the forward graph from the live tensors in
    ``params`` on every call; entries are perturbed in place and restored.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    n_checked = 0
    worst = ("", 0, 0.0, 0.0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples_per_tensor else rng.choice(
            n, size=samples_per_tensor, replace=False)
        for i in idx:
            x0 = flat[i]
            flat[i] = x0 + step
            up = loss_fn().item()
            flat[i] = x0 - step
            down = loss_fn().item()
            flat[i] = x0
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), _MAGNITUDE_FLOOR)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(i), a, float(numeric))
    return GradCheckResult(max_rel_err=max_rel, n_checked=n_checked, worst=worst)
