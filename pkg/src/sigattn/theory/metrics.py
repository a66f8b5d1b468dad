"""Sparsity of attention rows and per-token FLOP accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


def hoyer_sparsity(c) -> float:
    """(sqrt(n) - |c|_1 / |c|_2) / (sqrt(n) - 1); 0 for uniform, 1 for one-hot."""
    c = np.asarray(c, dtype=np.float64).ravel()
    n = c.size
    if n < 2:
        raise ValueError("need at least two entries")
    if np.any(c < 0):
        raise ValueError("entries must be non-negative")
    l2 = float(np.sqrt(np.sum(c * c)))
    if l2 == 0.0:
        raise ValueError("all-zero input has no defined sparsity")
    root = math.sqrt(n)
    h = (root - float(np.sum(c)) / l2) / (root - 1.0)
    # rounding can leave tiny excursions outside [0, 1]
    return min(1.0, max(0.0, h))


def row_hoyer(P) -> float:
    """Mean Hoyer sparsity over rows of an attention matrix (all-zero rows skipped)."""
    P = np.asarray(P, dtype=np.float64)
    rows = P.reshape(-1, P.shape[-1])
    vals = [hoyer_sparsity(r) for r in rows if np.any(r)]
    return float(np.mean(vals)) if vals else 0.0


@dataclass(frozen=True)
class FlopCount:
    """Forward flops per token per head, kept as exact fractions."""

    logits: Fraction
    activation: Fraction
    delta: Fraction
    c: Fraction

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("logits", "activation", "delta", "c")}


ACT_FLOPS = {"softmax": 3, "sigmoid": 5}


def flop_count(n_ctx: int, d_head: int, causal: bool = False, activation: str = "sigmoid") -> FlopCount:
    if n_ctx < 1 or d_head < 1:
        raise ValueError("n_ctx and d_head must be >= 1")
    if activation not in ACT_FLOPS:
        raise ValueError(f"activation must be one of {sorted(ACT_FLOPS)}")
    c = Fraction(n_ctx + 1, 2 * n_ctx) if causal else Fraction(1)
    logits = 2 * c * n_ctx * d_head
    act = ACT_FLOPS[activation] * c * n_ctx
    return FlopCount(logits=logits, activation=act, delta=Fraction(1, d_head), c=c)
