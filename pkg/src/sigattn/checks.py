"""Self-checks shared by the CLI and the acceptance suite.

``equivalence_suite`` compares the tiled kernels with the reference attention
over a grid of block shapes. ``gradcheck_suite`` compares every analytic
backward with central finite differences, one row per configuration axis.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attn import AttnConfig, attn_backward, attn_forward
from .core import Rng
from .flash import BlockSpec, flash_backward, flash_forward

EQUIV_TOL = 1e-10
ATTN_TOL = 1e-6
MODEL_TOL = 1e-5

# Two-level design over (causal, alibi, neg_log_n): every pair of factors sees
# all four level combinations in four runs.
EQUIV_CONFIGS = {
    "full": AttnConfig(num_heads=4),
    "full+alibi+neg_log_n": AttnConfig(bias="neg_log_n", pos_bias="alibi", num_heads=4),
    "causal+alibi": AttnConfig(causal=True, pos_bias="alibi", num_heads=4),
    "causal+neg_log_n": AttnConfig(causal=True, bias="neg_log_n", num_heads=4),
}


def block_grid(n: int) -> list[tuple[int, int]]:
    sizes = sorted({1, 3, 32, 64, n, n + 7})
    return [(r, c) for r in sizes for c in sizes]


@dataclass
class EquivRow:
    n: int
    config: str
    b_r: int
    b_c: int
    max_err: float


def equivalence_suite(ns=(16, 130, 257), blocks=None, d: int = 8, seed: int = 0, threads: int = 1,
                      configs=None) -> list[EquivRow]:
    """Max abs difference over O, dQ, dK, dV between tiled and reference paths."""
    configs = EQUIV_CONFIGS if configs is None else configs
    rows = []
    for n in ns:
        if n < 1:
            raise ValueError("n must be >= 1")
        r = np.random.default_rng(seed + n)
        Q, K, V, dO = (r.standard_normal((n, d)) for _ in range(4))
        for name, cfg in configs.items():
            head = 1 if cfg.num_heads > 1 else 0
            O, _, _ = attn_forward(Q, K, V, cfg, head=head)
            g = attn_backward(Q, K, V, dO, cfg, head=head)
            for br, bc in (block_grid(n) if blocks is None else blocks):
                spec = BlockSpec(br, bc)
                Of, _ = flash_forward(Q, K, V, cfg, spec, head=head, threads=threads)
                gf, _ = flash_backward(Q, K, V, dO, cfg, spec, head=head, threads=threads)
                err = max(float(np.max(np.abs(a - b))) for a, b in
                          ((O, Of), (g.dQ, gf.dQ), (g.dK, gf.dK), (g.dV, gf.dV)))
                rows.append(EquivRow(n, name, br, bc, err))
    return rows


# ---------------------------------------------------------------- finite differences


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def relaxed(tol: float, h: float) -> float:
    """Central differences carry O(h^2) truncation error, so large steps loosen the bar."""
    return max(tol, 100.0 * h * h)


def attention_gradcheck(cfg: AttnConfig, n: int = 5, d: int = 3, h: float = 1e-5, seed: int = 0,
                        use_flash: bool = False) -> float:
    """Worst relative error of dQ, dK, dV (and dbias when learnable) for L = sum(O * G)."""
    r = np.random.default_rng(seed)
    Q, K, V, G = (r.standard_normal((n, d)) for _ in range(4))
    head = 1 if cfg.num_heads > 1 else 0
    if use_flash:
        g = flash_backward(Q, K, V, G, cfg, BlockSpec(2, 3), head=head)[0]
    else:
        g = attn_backward(Q, K, V, G, cfg, head=head)
    out = lambda q, k, v, c=cfg: float(np.sum(attn_forward(q, k, v, c, head=head)[0] * G))
    errs = [rel_err(g.dQ, central_diff(lambda x: out(x, K, V), Q, h)),
            rel_err(g.dK, central_diff(lambda x: out(Q, x, V), K, h)),
            rel_err(g.dV, central_diff(lambda x: out(Q, K, x), V, h))]
    if cfg.bias == "learnable":
        b0 = cfg.bias_value
        num = (out(Q, K, V, replace(cfg, bias_value=b0 + h)) - out(Q, K, V, replace(cfg, bias_value=b0 - h))) / (2 * h)
        errs.append(rel_err(np.sum(g.dbias), num))
    return max(errs)


def model_gradcheck(model_kw: dict, h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error over every parameter of a 2-token, d=4, 1-layer model."""
    from .nn.model import ModelConfig, forward, init_params, loss_and_grads, loss_fn

    cfg = ModelConfig(task="ksum", seq_len=2, d_model=4, **model_kw)
    r = np.random.default_rng(seed + 1)
    params = {k: v + 0.3 * r.standard_normal(v.shape) for k, v in init_params(cfg, Rng(seed)).items()}
    x = np.array([[0.7, 1.0], [-1.2, 0.0], [0.3, 1.0]])
    y = x[:, 0] * x[:, 1]
    _, grads, _, _ = loss_and_grads(params, cfg, x, y)
    worst = 0.0
    for name in params:
        def f(v, name=name):
            p = dict(params)
            p[name] = v
            return loss_fn(cfg, forward(p, cfg, x)[0], y)[0]
        worst = max(worst, rel_err(grads[name], central_diff(f, params[name], h)))
    return worst


@dataclass
class GradRow:
    axis: str
    activation: str
    attn_naive: float
    attn_flash: float | None
    model: float


def grad_axes(activation: str) -> list[tuple[str, dict, dict]]:
    """(label, attention kwargs, model kwargs) with one knob toggled per row."""
    rows = [("baseline", {}, {})]
    if activation == "sigmoid":
        rows += [("bias=constant", dict(bias="constant", bias_value=-4.0), dict(bias="constant", bias_init=-4.0)),
                 ("bias=neg_log_n", dict(bias="neg_log_n"), dict(bias="neg_log_n")),
                 ("bias=neg_log_rowlen", dict(bias="neg_log_rowlen", causal=True),
                  dict(bias="neg_log_rowlen", causal=True)),
                 ("bias=learnable", dict(bias="learnable", bias_value=-1.5), dict(bias="learnable", bias_init=-1.5)),
                 ("alpha=1", dict(alpha=1.0), dict(alpha=1.0))]
    rows += [("qk_norm", {}, dict(qk_norm=True, n_heads=1)),
             ("layerscale=off", {}, dict(layerscale=None)),
             ("causal", dict(causal=True), dict(causal=True)),
             ("pos=alibi", dict(pos_bias="alibi", num_heads=4), dict(pos="alibi")),
             ("pos=rope", {}, dict(pos="rope", n_heads=1)),
             ("pos=sincos", {}, dict(pos="sincos")),
             ("pos=learnable", {}, dict(pos="learnable"))]
    return rows


def gradcheck_suite(activations=("sigmoid", "softmax"), h: float = 1e-5, seed: int = 0) -> list[GradRow]:
    out = []
    for act in activations:
        for label, akw, mkw in grad_axes(act):
            acfg = AttnConfig(activation=act, **akw)
            naive = attention_gradcheck(acfg, h=h, seed=seed)
            flash = None
            if act == "sigmoid" and acfg.alpha == 0:
                flash = attention_gradcheck(acfg, h=h, seed=seed, use_flash=True)
            mkw = {"n_heads": 2, **mkw}
            out.append(GradRow(label, act, naive, flash, model_gradcheck(dict(activation=act, **mkw), h, seed)))
    return out


def gradrow_ok(row: GradRow, h: float, attn_tol: float = ATTN_TOL, model_tol: float = MODEL_TOL) -> bool:
    a, m = relaxed(attn_tol, h), relaxed(model_tol, h)
    return row.attn_naive <= a and (row.attn_flash is None or row.attn_flash <= a) and row.model <= m
