"""Fully connected ReLU baseline with the same calling convention as the transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Rng


@dataclass(frozen=True)
class MLPConfig:
    task: str = "ksum"
    seq_len: int = 20
    vocab: int = 0
    hidden: tuple = (900, 300)
    init_std: float = 0.02

    def __post_init__(self):
        if self.task not in ("ksum", "pair_repeat"):
            raise ValueError("task must be ksum or pair_repeat")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")

    @property
    def in_dim(self) -> int:
        return self.seq_len if self.task == "ksum" else self.seq_len * (self.vocab + 1)

    @property
    def n_layers(self) -> int:
        # no attention layers, so the metrics stream has no per-layer columns
        return 0


def mlp_param_count(in_dim: int, hidden) -> int:
    sizes = [in_dim, *hidden, 1]
    return sum(a * b + b for a, b in zip(sizes, sizes[1:]))


def matched_hidden(target: int, in_dim: int, depth: int = 2) -> tuple:
    """Equal-width hidden layers whose parameter count is closest to ``target``."""
    best = min(range(1, 4097), key=lambda h: abs(mlp_param_count(in_dim, (h,) * depth) - target))
    return (best,) * depth


def init_mlp(cfg: MLPConfig, rng: Rng) -> dict[str, np.ndarray]:
    sizes = [cfg.in_dim, *cfg.hidden, 1]
    p = {}
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        p[f"mlp.{i}.w"] = rng.trunc_normal((a, b), std=cfg.init_std)
        p[f"mlp.{i}.b"] = np.zeros(b)
    return p


def _features(cfg: MLPConfig, inputs) -> np.ndarray:
    if cfg.task == "ksum":
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.seq_len:
            raise ValueError(f"bad input shape {x.shape}")
        return x
    tok = np.asarray(inputs, dtype=np.int64)
    if tok.ndim != 2 or tok.shape[1] > cfg.seq_len:
        raise ValueError(f"bad input shape {tok.shape}")
    # shorter batches are padded up to the trained width
    full = np.full((tok.shape[0], cfg.seq_len), cfg.vocab, dtype=np.int64)
    full[:, : tok.shape[1]] = tok
    return np.eye(cfg.vocab + 1)[full].reshape(tok.shape[0], -1)


def mlp_forward(params, cfg: MLPConfig, inputs, keep_cache: bool = False):
    h = _features(cfg, inputs)
    acts = [h]
    L = len(cfg.hidden) + 1
    for i in range(L):
        h = h @ params[f"mlp.{i}.w"] + params[f"mlp.{i}.b"]
        if i < L - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h[:, 0], [], (acts if keep_cache else None)


def mlp_backward(params, cfg: MLPConfig, cache, dlogits) -> dict[str, np.ndarray]:
    grads = {}
    d = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
    for i in reversed(range(len(cfg.hidden) + 1)):
        grads[f"mlp.{i}.w"] = cache[i].T @ d
        grads[f"mlp.{i}.b"] = d.sum(axis=0)
        if i:
            d = (d @ params[f"mlp.{i}.w"].T) * (cache[i] > 0)
    return grads


def relative_gap(a: int, b: int) -> float:
    return abs(a - b) / max(a, b, 1) if a or b else 0.0

