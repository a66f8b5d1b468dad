"""Reference (materializing) attention: forward, analytic backward, and knobs.

Everything here builds the full n x n logit matrix on purpose. These
functions are the oracle that the tiled kernels in :mod:`sigattn.flash` and the
toy transformer in :mod:`sigattn.nn` are checked against.

Arrays may carry leading batch axes: ``Q`` has shape ``(..., n_q, d)``,
``K`` ``(..., n_k, d)`` and ``V`` ``(..., n_k, d_v)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import row_softmax, sigmoid_via_tanh

ACTIVATIONS = ("softmax", "sigmoid", "relu", "tanh")
BIAS_MODES = ("none", "constant", "neg_log_n", "neg_log_rowlen", "learnable")

# Non-causal ALiBi: keys after the query get this fraction of the head slope.
ALIBI_LOOKAHEAD_RATIO = 0.5


@dataclass(frozen=True)
class AttnConfig:
    """Attention knobs.

    ``bias_value`` is the constant for ``bias="constant"`` and the current
    parameter value for ``bias="learnable"``. ``qk_norm``/``qk_norm_eps`` are
    consumed by callers that own the QK-norm gains (multihead_attn, the toy
    model); :func:`attn_forward` receives already-normalized Q and K.
    """

    activation: str = "sigmoid"
    bias: str = "none"
    bias_value: float = 0.0
    alpha: float = 0.0
    causal: bool = False
    pos_bias: str = "none"
    num_heads: int = 1
    scale: float | None = None
    qk_norm: bool = False
    qk_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias not in BIAS_MODES:
            raise ValueError(f"unknown bias mode {self.bias!r}")
        if self.bias != "none" and self.activation != "sigmoid":
            raise ValueError("logit bias modes are only defined for sigmoid attention")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.pos_bias not in ("none", "alibi"):
            raise ValueError(f"unknown pos_bias {self.pos_bias!r}")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")

    def scale_for(self, d_qk: int) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(d_qk)


@dataclass
class GradTriple:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    # gradient w.r.t. a scalar logit bias (sum of dS over visible entries), per batch item
    dbias: np.ndarray | float = field(default=0.0)


def visible_mask(n_q: int, n_k: int, causal: bool) -> np.ndarray:
    if not causal:
        return np.ones((n_q, n_k), dtype=bool)
    return np.tril(np.ones((n_q, n_k), dtype=bool))


def row_lengths(n_q: int, n_k: int, causal: bool) -> np.ndarray:
    if causal:
        return np.minimum(np.arange(1, n_q + 1), n_k)
    return np.full(n_q, n_k)


def logit_bias(cfg: AttnConfig, n: int, row_lengths=None) -> np.ndarray:
    """Per-row scalar added to every logit of that row before activation."""
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    lens = np.full(n, n) if row_lengths is None else np.asarray(row_lengths)
    if np.any(lens < 1):
        raise ValueError("row lengths must be >= 1")
    if cfg.bias == "none":
        return np.zeros(len(lens))
    if cfg.bias in ("constant", "learnable"):
        return np.full(len(lens), float(cfg.bias_value))
    if cfg.bias == "neg_log_n":
        return np.full(len(lens), -math.log(n))
    return -np.log(lens.astype(np.float64))


def alibi_slopes(num_heads: int) -> np.ndarray:
    """Geometric head slopes 2^(-8(h+1)/H)."""
    h = np.arange(num_heads, dtype=np.float64)
    return 2.0 ** (-8.0 * (h + 1) / num_heads)


def alibi_block(rows: np.ndarray, cols: np.ndarray, slope: float, causal: bool) -> np.ndarray:
    """ALiBi bias for global row/col indices; used by both paths so they agree."""
    dist = rows[:, None].astype(np.float64) - cols[None, :].astype(np.float64)
    if causal:
        return -slope * dist
    behind = np.maximum(dist, 0.0)
    ahead = np.maximum(-dist, 0.0)
    return -slope * behind - slope * ALIBI_LOOKAHEAD_RATIO * ahead


def alibi_bias(n: int, head: int, num_heads: int, causal: bool, n_k: int | None = None) -> np.ndarray:
    if not 0 <= head < num_heads:
        raise ValueError(f"head {head} out of range for {num_heads} heads")
    n_k = n if n_k is None else n_k
    slope = alibi_slopes(num_heads)[head]
    return alibi_block(np.arange(n), np.arange(n_k), slope, causal)


def seq_norm_weights(n: int, alpha: float, causal: bool, n_k: int | None = None) -> np.ndarray:
    """Multiplier (1/n_i)^alpha for every entry of row i, n_i = visible keys."""
    n_k = n if n_k is None else n_k
    lens = row_lengths(n, n_k, causal).astype(np.float64)
    w = lens ** (-alpha)
    return np.repeat(w[:, None], n_k, axis=1)


def _check_shapes(Q, K, V, cfg: AttnConfig):
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"Q/K feature mismatch: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"K/V length mismatch: {K.shape} vs {V.shape}")
    if cfg.causal and Q.shape[-2] != K.shape[-2]:
        raise ValueError("causal attention needs equal query and key lengths")


def _pos_bias(cfg: AttnConfig, n_q: int, n_k: int, head) -> np.ndarray | float:
    if cfg.pos_bias == "none":
        return 0.0
    if head is None and cfg.num_heads == 1:
        head = 0
    if head is None:
        # heads live on axis -3
        return np.stack([alibi_bias(n_q, h, cfg.num_heads, cfg.causal, n_k)
                         for h in range(cfg.num_heads)])
    return alibi_bias(n_q, head, cfg.num_heads, cfg.causal, n_k)


def _activate(S: np.ndarray, mask: np.ndarray, activation: str) -> np.ndarray:
    if activation == "softmax":
        return row_softmax(S, mask)
    if activation == "sigmoid":
        return np.where(mask, sigmoid_via_tanh(S), 0.0)
    if activation == "relu":
        return np.where(mask, np.maximum(S, 0.0), 0.0)
    return np.where(mask, np.tanh(S), 0.0)


def _forward_parts(Q, K, cfg: AttnConfig, head):
    n_q, n_k = Q.shape[-2], K.shape[-2]
    scale = cfg.scale_for(Q.shape[-1])
    mask = visible_mask(n_q, n_k, cfg.causal)
    lens = row_lengths(n_q, n_k, cfg.causal)
    b = logit_bias(cfg, n_k, lens)[:, None]
    S = scale * (Q @ np.swapaxes(K, -1, -2)) + _pos_bias(cfg, n_q, n_k, head) + b
    A = _activate(S, mask, cfg.activation)
    w = lens.astype(np.float64)[:, None] ** (-cfg.alpha) if cfg.alpha > 0 else None
    return S, A, w, mask, scale


def attn_forward(Q, K, V, cfg: AttnConfig, head: int | None = None):
    """Return ``(O, P, S)`` for the configured activation.

    ``head`` selects the ALiBi slope; when it is ``None`` and ALiBi is on,
    the heads axis is taken to be axis -3 of the inputs.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    _check_shapes(Q, K, V, cfg)
    S, A, w, _, _ = _forward_parts(Q, K, cfg, head)
    P = A * w if w is not None else A
    O = P @ V
    return O, P, S


def attn_backward(Q, K, V, dO, cfg: AttnConfig, head: int | None = None) -> GradTriple:
    Q, K, V, dO = (np.asarray(a, dtype=np.float64) for a in (Q, K, V, dO))
    _check_shapes(Q, K, V, cfg)
    if dO.shape[:-1] != Q.shape[:-1] or dO.shape[-1] != V.shape[-1]:
        raise ValueError(f"dO shape {dO.shape} does not match output")
    S, A, w, mask, scale = _forward_parts(Q, K, cfg, head)
    P = A * w if w is not None else A
    Vt = np.swapaxes(V, -1, -2)
    dV = np.swapaxes(P, -1, -2) @ dO
    dA = dO @ Vt
    if w is not None:
        dA = dA * w
    if cfg.activation == "softmax":
        O = P @ V
        delta = np.sum(dO * O, axis=-1, keepdims=True)
        dS = A * (dA - delta)
    elif cfg.activation == "sigmoid":
        dS = A * (1.0 - A) * dA
    elif cfg.activation == "relu":
        dS = np.where(mask & (S > 0), dA, 0.0)
    else:
        dS = np.where(mask, (1.0 - A * A) * dA, 0.0)
    dQ = scale * (dS @ K)
    dK = scale * (np.swapaxes(dS, -1, -2) @ Q)
    dbias = dS.sum(axis=(-1, -2))
    return GradTriple(dQ, dK, dV, dbias)


def qk_normalize(M, gain, eps: float = 1e-6) -> np.ndarray:
    """Row LayerNorm without additive shift: (m - mean) / sqrt(var + eps) * gain."""
    M = np.asarray(M, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape[-1] != M.shape[-1]:
        raise ValueError("gain length must equal the feature dimension")
    mu = M.mean(axis=-1, keepdims=True)
    xc = M - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gain


def qk_normalize_backward(dY, M, gain, eps: float = 1e-6):
    """Return (dM, dgain) for :func:`qk_normalize`; dgain is summed over rows."""
    M = np.asarray(M, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    d = M.shape[-1]
    xc = M - M.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    dgain = (dY * xhat).reshape(-1, d).sum(axis=0)
    g = dY * gain
    dM = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dM, dgain


def rope_angles(n: int, d: int, base: float = 10000.0) -> np.ndarray:
    if d % 2:
        raise ValueError("RoPE needs an even feature dimension")
    freqs = base ** (-2.0 * np.arange(d // 2) / d)
    return np.arange(n, dtype=np.float64)[:, None] * freqs[None, :]


def apply_rope(M, base: float = 10000.0, inverse: bool = False) -> np.ndarray:
    """Rotate feature pairs (2k, 2k+1) of row p by p * base^(-2k/d).

    ``inverse=True`` applies the transpose rotation (used by backprop).
    """
    M = np.asarray(M, dtype=np.float64)
    n, d = M.shape[-2], M.shape[-1]
    ang = rope_angles(n, d, base)
    cos, sin = np.cos(ang), np.sin(ang)
    if inverse:
        sin = -sin
    x0, x1 = M[..., 0::2], M[..., 1::2]
    out = np.empty_like(M)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def multihead_attn(X, Wq, Wk, Wv, Wo, cfg: AttnConfig, qk_gains=None) -> np.ndarray:
    """Concatenate per-head attention outputs and project with ``Wo``.

    ``Wq``, ``Wk``, ``Wv`` are sequences with one (d, d_head) matrix per head.
    """
    X = np.asarray(X, dtype=np.float64)
    h = len(Wq)
    if not (len(Wk) == len(Wv) == h):
        raise ValueError("need the same number of Wq, Wk, Wv matrices")
    d_v = np.asarray(Wv[0]).shape[1]
    if h * d_v != np.asarray(Wo).shape[0]:
        raise ValueError(f"Wo has {np.asarray(Wo).shape[0]} rows, expected {h * d_v}")
    outs = []
    for i in range(h):
        Q, K, V = X @ Wq[i], X @ Wk[i], X @ Wv[i]
        if cfg.qk_norm:
            g = np.ones(Q.shape[-1]) if qk_gains is None else qk_gains[i]
            Q = qk_normalize(Q, g, cfg.qk_norm_eps)
            K = qk_normalize(K, g, cfg.qk_norm_eps)
        O, _, _ = attn_forward(Q, K, V, cfg, head=i if cfg.pos_bias == "alibi" else None)
        outs.append(O)
    return np.concatenate(outs, axis=-1) @ Wo
