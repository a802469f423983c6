"""Kernel backend chosen at import.

The compiled extension is used when it was built; otherwise the numpy
versions are.  Setting ``PERFUSION_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from perfusion.numerics import _pykernels as python_backend

compiled_backend = None
if os.environ.get("PERFUSION_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from perfusion.numerics import _ckernels as compiled_backend
    except ImportError:
        compiled_backend = None

_NAMES = ("all_finite", "gelu_forward", "layer_norm_forward", "layer_norm_backward", "softmax_rows")


def use(backend: str) -> None:
    """Switch every kernel to ``"compiled"`` or ``"python"`` (used by the benchmark)."""
    global impl, BACKEND
    if backend == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not available in this install")
        impl = compiled_backend
    elif backend == "python":
        impl = python_backend
    else:
        raise ValueError(f"unknown backend {backend!r}")
    BACKEND = backend
    g = globals()
    for name in _NAMES:
        g[name] = getattr(impl, name)


use("compiled" if compiled_backend is not None else "python")
