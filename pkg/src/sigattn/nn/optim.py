"""Adam over a parameter dict, learning-rate schedules and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """Bias-corrected Adam. Returns new (params, state); inputs are not mutated."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new_p[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm: float | None):
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def lr_at(step: int, total: int, max_lr: float, schedule: str = "constant", warmup_frac: float = 0.05,
          min_lr: float = 0.0) -> float:
    """``step`` is 0-based. Cosine decays to ``min_lr`` after a linear warmup."""
    if schedule == "constant":
        return max_lr
    if schedule != "cosine":
        raise ValueError(f"unknown schedule {schedule!r}")
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return max_lr * (step + 1) / warm
    frac = min(1.0, (step - warm) / max(1, total - warm))
    return min_lr + 0.5 * (max_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
