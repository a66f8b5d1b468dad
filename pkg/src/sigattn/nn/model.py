"""Pre-LayerNorm transformer for the synthetic tasks, with a hand-written backward.

Parameters live in a flat ``dict[str, ndarray]`` keyed like ``layers.0.wq``.
Activations are batched as (B, T, D); attention heads as (B, H, T, d_head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..attn import AttnConfig, apply_rope, attn_backward, attn_forward, qk_normalize, qk_normalize_backward
from ..core import Rng
from ..flash import BlockSpec, flash_backward, flash_forward

TASKS = ("ksum", "pair_repeat")
POSITIONS = ("none", "learnable", "sincos", "rope", "alibi")
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    task: str = "ksum"
    seq_len: int = 20
    vocab: int = 0
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 1
    mlp_ratio: int = 4
    activation: str = "sigmoid"
    bias: str = "none"
    bias_init: float = 0.0
    alpha: float = 0.0
    causal: bool = False
    pos: str = "learnable"
    qk_norm: bool = False
    layerscale: float | None = 1e-4
    attn_impl: str = "naive"
    flash_blocks: tuple = (128, 128)
    init_std: float = 0.02
    ln_eps: float = 1e-5
    qk_eps: float = 1e-6

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.pos not in POSITIONS:
            raise ValueError(f"pos must be one of {POSITIONS}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.pos == "rope" and (self.d_model // self.n_heads) % 2:
            raise ValueError("rope needs an even head dimension")
        if self.task == "pair_repeat" and self.vocab < 2:
            raise ValueError("pair_repeat needs vocab >= 2")
        if self.attn_impl not in ("naive", "flash"):
            raise ValueError("attn_impl must be naive or flash")
        if self.attn_impl == "flash" and (self.activation != "sigmoid" or self.alpha != 0):
            raise ValueError("flash attention needs sigmoid activation and alpha = 0")
        # validates the attention knobs once
        self.attn_config(self.bias_init)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def attn_config(self, bias_value: float) -> AttnConfig:
        return AttnConfig(activation=self.activation, bias=self.bias, bias_value=float(bias_value),
                          alpha=self.alpha, causal=self.causal,
                          pos_bias="alibi" if self.pos == "alibi" else "none", num_heads=self.n_heads,
                          qk_norm=self.qk_norm, qk_norm_eps=self.qk_eps)


def sincos_table(T: int, D: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    out = np.zeros((T, D))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)[:, : D // 2]
    return out


def init_params(cfg: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    D, R = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    tn = lambda *shape: rng.trunc_normal(shape, std=cfg.init_std)
    p: dict[str, np.ndarray] = {}
    if cfg.task == "ksum":
        p["embed.w_in"] = tn(D)
        p["embed.b_in"] = np.zeros(D)
    else:
        p["embed.tok"] = tn(cfg.vocab + 1, D)
    if cfg.pos == "learnable":
        p["embed.pos"] = tn(cfg.seq_len, D)
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(D), np.zeros(D)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + w] = tn(D, D)
        if cfg.qk_norm:
            p[pre + "qn.gq"], p[pre + "qn.gk"] = np.ones(cfg.d_head), np.ones(cfg.d_head)
        if cfg.bias == "learnable":
            p[pre + "attn_bias"] = np.array(float(cfg.bias_init))
        if cfg.layerscale is not None:
            p[pre + "gamma_a"] = np.full(D, float(cfg.layerscale))
            p[pre + "gamma_m"] = np.full(D, float(cfg.layerscale))
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(D), np.zeros(D)
        p[pre + "w1"], p[pre + "b1"] = tn(D, R), np.zeros(R)
        p[pre + "w2"], p[pre + "b2"] = tn(R, D), np.zeros(D)
    p["ln_f.g"], p["ln_f.b"] = np.ones(D), np.zeros(D)
    p["head.w"], p["head.b"] = tn(D, 1), np.zeros(1)
    return p


def param_count(params) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------- primitives


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, cache, g):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    flat = dy.reshape(-1, dy.shape[-1])
    return dx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)


def gelu(u):
    """tanh-approximate GELU; also returns the tanh term for the backward pass."""
    u2 = u * u
    t = np.tanh(GELU_C * u * (1.0 + 0.044715 * u2))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t=None):
    u2 = u * u
    if t is None:
        t = np.tanh(GELU_C * u * (1.0 + 0.044715 * u2))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u2)


def _split(x, H):
    B, T, D = x.shape
    return x.reshape(B, T, H, D // H).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _sum_bt(a, b):
    """sum over batch and time of outer products: a (B,T,I), b (B,T,J) -> (I,J)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


# ---------------------------------------------------------------- attention dispatch


def _attn_fwd(cfg: ModelConfig, acfg: AttnConfig, Q, K, V):
    if cfg.attn_impl == "naive":
        O, P, _ = attn_forward(Q, K, V, acfg, head=None)
        return O, P
    blocks = BlockSpec(*cfg.flash_blocks)
    O = np.empty(Q.shape[:-1] + (V.shape[-1],))
    for b in range(Q.shape[0]):
        for h in range(Q.shape[1]):
            O[b, h] = flash_forward(Q[b, h], K[b, h], V[b, h], acfg, blocks, head=h)[0]
    return O, None


def _attn_bwd(cfg: ModelConfig, acfg: AttnConfig, Q, K, V, dO):
    if cfg.attn_impl == "naive":
        g = attn_backward(Q, K, V, dO, acfg, head=None)
        return g.dQ, g.dK, g.dV, float(np.sum(g.dbias))
    blocks = BlockSpec(*cfg.flash_blocks)
    dQ, dK, dV = np.empty_like(Q), np.empty_like(K), np.empty_like(V)
    db = 0.0
    for b in range(Q.shape[0]):
        for h in range(Q.shape[1]):
            g, _ = flash_backward(Q[b, h], K[b, h], V[b, h], dO[b, h], acfg, blocks, head=h)
            dQ[b, h], dK[b, h], dV[b, h] = g.dQ, g.dK, g.dV
            db += g.dbias
    return dQ, dK, dV, db


# ---------------------------------------------------------------- model


def _embed(params, cfg: ModelConfig, inputs):
    if cfg.task == "ksum":
        x = np.asarray(inputs, dtype=np.float64)
        h = x[..., None] * params["embed.w_in"] + params["embed.b_in"]
    else:
        tok = np.asarray(inputs, dtype=np.int64)
        h = params["embed.tok"][tok]
    T = h.shape[1]
    if T > cfg.seq_len:
        raise ValueError(f"sequence length {T} exceeds configured {cfg.seq_len}")
    if cfg.pos == "learnable":
        h = h + params["embed.pos"][:T]
    elif cfg.pos == "sincos":
        h = h + sincos_table(T, cfg.d_model)
    return h


def forward(params, cfg: ModelConfig, inputs, keep_cache: bool = False):
    """Return (logits (B,), per-layer attention matrices, cache)."""
    x = _embed(params, cfg, inputs)
    if x.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"bad input shape {np.shape(inputs)}")
    H = cfg.n_heads
    caches, attn_mats = [], []
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        c = {"x_in": x}
        a, c["ln1"] = layer_norm(x, params[pre + "ln1.g"], params[pre + "ln1.b"], cfg.ln_eps)
        q, k, v = (_split(a @ params[pre + w], H) for w in ("wq", "wk", "wv"))
        c.update(a=a, q=q, k=k, v=v)
        if cfg.qk_norm:
            q = qk_normalize(q, params[pre + "qn.gq"], cfg.qk_eps)
            k = qk_normalize(k, params[pre + "qn.gk"], cfg.qk_eps)
        if cfg.pos == "rope":
            q, k = apply_rope(q), apply_rope(k)
        bias = float(params[pre + "attn_bias"]) if cfg.bias == "learnable" else cfg.bias_init
        acfg = cfg.attn_config(bias)
        O, P = _attn_fwd(cfg, acfg, q, k, v)
        c.update(qf=q, kf=k, acfg=acfg)
        attn_mats.append(P)
        om = _merge(O)
        att = om @ params[pre + "wo"]
        c.update(om=om, att=att)
        ga = params.get(pre + "gamma_a")
        x = x + (att * ga if ga is not None else att)
        c["x_mid"] = x
        m, c["ln2"] = layer_norm(x, params[pre + "ln2.g"], params[pre + "ln2.b"], cfg.ln_eps)
        u = m @ params[pre + "w1"] + params[pre + "b1"]
        hdn, th = gelu(u)
        z = hdn @ params[pre + "w2"] + params[pre + "b2"]
        c.update(m=m, u=u, hdn=hdn, th=th, z=z)
        gm = params.get(pre + "gamma_m")
        x = x + (z * gm if gm is not None else z)
        caches.append(c)
    y, lnf = layer_norm(x, params["ln_f.g"], params["ln_f.b"], cfg.ln_eps)
    pooled = y.mean(axis=1)
    logits = (pooled @ params["head.w"] + params["head.b"])[:, 0]
    cache = {"layers": caches, "lnf": lnf, "pooled": pooled, "T": x.shape[1], "inputs": inputs} if keep_cache else None
    return logits, attn_mats, cache


def backward(params, cfg: ModelConfig, cache, dlogits) -> dict[str, np.ndarray]:
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    H, T = cfg.n_heads, cache["T"]
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
    grads["head.w"] = cache["pooled"].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["head.w"].T
    dy = np.repeat(dpooled[:, None, :], T, axis=1) / T
    dx, grads["ln_f.g"], grads["ln_f.b"] = layer_norm_backward(dy, cache["lnf"], params["ln_f.g"])
    for l in reversed(range(cfg.n_layers)):
        pre = f"layers.{l}."
        c = cache["layers"][l]
        # MLP branch
        gm = params.get(pre + "gamma_m")
        if gm is not None:
            grads[pre + "gamma_m"] = (dx * c["z"]).reshape(-1, cfg.d_model).sum(axis=0)
            dz = dx * gm
        else:
            dz = dx
        grads[pre + "w2"] = _sum_bt(c["hdn"], dz)
        grads[pre + "b2"] = dz.reshape(-1, cfg.d_model).sum(axis=0)
        du = (dz @ params[pre + "w2"].T) * gelu_grad(c["u"], c["th"])
        grads[pre + "w1"] = _sum_bt(c["m"], du)
        grads[pre + "b1"] = du.reshape(-1, du.shape[-1]).sum(axis=0)
        dm = du @ params[pre + "w1"].T
        dxm, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(dm, c["ln2"], params[pre + "ln2.g"])
        dx = dx + dxm
        # attention branch
        ga = params.get(pre + "gamma_a")
        if ga is not None:
            grads[pre + "gamma_a"] = (dx * c["att"]).reshape(-1, cfg.d_model).sum(axis=0)
            datt = dx * ga
        else:
            datt = dx
        grads[pre + "wo"] = _sum_bt(c["om"], datt)
        dO = _split(datt @ params[pre + "wo"].T, H)
        dq, dk, dv, dbias = _attn_bwd(cfg, c["acfg"], c["qf"], c["kf"], c["v"], dO)
        if cfg.bias == "learnable":
            grads[pre + "attn_bias"] = np.array(dbias)
        if cfg.pos == "rope":
            dq, dk = apply_rope(dq, inverse=True), apply_rope(dk, inverse=True)
        if cfg.qk_norm:
            dq, grads[pre + "qn.gq"] = qk_normalize_backward(dq, c["q"], params[pre + "qn.gq"], cfg.qk_eps)
            dk, grads[pre + "qn.gk"] = qk_normalize_backward(dk, c["k"], params[pre + "qn.gk"], cfg.qk_eps)
        da = np.zeros_like(c["a"])
        for w, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
            dm_ = _merge(dproj)
            grads[pre + w] = _sum_bt(c["a"], dm_)
            da += dm_ @ params[pre + w].T
        dxa, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(da, c["ln1"], params[pre + "ln1.g"])
        dx = dx + dxa
    # embeddings
    if cfg.pos == "learnable":
        grads["embed.pos"][:T] = dx.sum(axis=0)
    if cfg.task == "ksum":
        x = np.asarray(cache["inputs"], dtype=np.float64)
        grads["embed.w_in"] = (dx * x[..., None]).reshape(-1, cfg.d_model).sum(axis=0)
        grads["embed.b_in"] = dx.reshape(-1, cfg.d_model).sum(axis=0)
    else:
        tok = np.asarray(cache["inputs"], dtype=np.int64)
        np.add.at(grads["embed.tok"], tok.ravel(), dx.reshape(-1, cfg.d_model))
    return grads


# ---------------------------------------------------------------- losses


def loss_fn(cfg: ModelConfig, logits, targets):
    """Return (loss, dloss/dlogits). MSE for ksum, BCE-with-logits otherwise."""
    y = np.asarray(targets, dtype=np.float64)
    B = logits.shape[0]
    if cfg.task == "ksum":
        r = logits - y
        return float(np.mean(r * r)), 2.0 * r / B
    z = logits
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(np.mean(loss)), (prob - y) / B


def loss_and_grads(params, cfg: ModelConfig, inputs, targets):
    logits, mats, cache = forward(params, cfg, inputs, keep_cache=True)
    loss, dlogits = loss_fn(cfg, logits, targets)
    return loss, backward(params, cfg, cache, dlogits), logits, mats


def predict(params, cfg: ModelConfig, inputs) -> np.ndarray:
    return forward(params, cfg, inputs)[0]
