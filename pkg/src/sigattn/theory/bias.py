"""Bias that makes a row of sigmoid attention weights sum to one."""

from __future__ import annotations

import math

import numpy as np

from ..core import sigmoid_via_tanh


def bias_bracket(z) -> tuple[float, float]:
    """Interval guaranteed to contain the root: [-log(n-1) - max z, -log(n-1) - min z]."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size < 2:
        raise ValueError("need at least two logits")
    base = -math.log(z.size - 1)
    return base - float(z.max()), base - float(z.min())


def solve_bias(z, tol: float = 1e-12, max_iter: int = 400) -> float:
    """Return b with sum(sigmoid(z + b)) == 1 to within ``tol``.

    Plain bisection: the row mass is strictly increasing in b and the bracket
    is known in closed form, so this always converges.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    z = np.asarray(z, dtype=np.float64).ravel()
    lo, hi = bias_bracket(z)

    def mass(b):
        return float(np.sum(sigmoid_via_tanh(z + b)))

    if lo == hi:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = mass(mid) - 1.0
        if abs(f) <= tol or mid in (lo, hi):
            return mid
        if f < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def order_optimal_bias(z) -> float:
    """The cruder estimate -(max z + log n), kept for comparison only."""
    z = np.asarray(z, dtype=np.float64).ravel()
    return -(float(z.max()) + math.log(z.size))
