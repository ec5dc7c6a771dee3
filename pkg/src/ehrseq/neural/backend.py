"""Kernel backend selection.

The compiled Cython kernels are used when importable; the pure-numpy module
is the fallback and the semantic reference. ``EHRSEQ_BACKEND=python`` or
``=compiled`` forces a choice (the latter raises if the extension is absent,
so benchmarks cannot silently compare python against itself).
"""

from __future__ import annotations

import os

from . import kernels_py

_FORCED = os.environ.get("EHRSEQ_BACKEND", "").strip().lower()

if _FORCED == "python":
    kernels = kernels_py
elif _FORCED == "compiled":
    from . import _kernels as kernels  # noqa: F401
else:
    try:
        from . import _kernels as kernels  # type: ignore[no-redef]
    except ImportError:
        kernels = kernels_py


def backend_name() -> str:
    return kernels.BACKEND_NAME


def get_backend(name: str):
    """Explicit backend lookup, used by tests and the kernel benchmark."""
    if name == "python":
        return kernels_py
    if name == "compiled":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")
