"""Central finite-difference gradients, used as an oracle for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from perfusion.numerics.tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                   indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d fn() / d param by central differences, optionally only at ``indices``.

    Entries not listed in ``indices`` are left as NaN.
    """
    grad = np.full(param.shape, np.nan) if indices is not None else np.zeros(param.shape)
    targets = indices if indices is not None else list(np.ndindex(*param.shape))
    with no_grad():
        for idx in targets:
            orig = param.data[idx]
            param.data[idx] = orig + step
            hi = fn().item()
            param.data[idx] = orig - step
            lo = fn().item()
            param.data[idx] = orig
            grad[idx] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over entries where ``numeric`` is defined."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between autodiff and finite differences over ``params``."""
    for p in params:
        p.zero_grad()
    fn().backward()
    worst = 0.0
    for p in params:
        indices = None
        if max_entries is not None and p.size > max_entries:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, size=max_entries, replace=False)
            indices = [np.unravel_index(int(i), p.shape) for i in flat]
        numeric = numerical_grad(fn, p, step, indices)
        worst = max(worst, max_relative_error(p.grad, numeric))
    return worst
