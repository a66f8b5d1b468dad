"""Jacobian of a single sigmoid attention head and an upper bound on its norm.

Row convention throughout: X is (n, d) with tokens as rows, Q = X Wq,
K = X Wk, V = X Wv. The logits are x_i^T A x_j + b with
A = scale * Wq Wk^T, so the attention scale is folded into A. The map is
phi(X) = sigmoid(X A X^T + b) X Wv, with no row normalization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..attn import AttnConfig, attn_backward
from ..core import sigmoid_via_tanh, spectral_norm

# up to this many input coordinates the Jacobian is built column by column
DENSE_JACOBIAN_MAX = 64


@dataclass
class LipschitzReport:
    sigma_inf: float
    sigma_prime_inf: float
    a_spec: float
    mean_sq_norm: float
    wv_spec: float
    bound: float
    n: int = 0
    scale: float = 1.0
    bias: float = 0.0
    sigma_inf_cap: float = 0.0
    sigma_prime_inf_cap: float = 0.0
    bound_with_caps: float = 0.0
    convention: str = "A = scale * Wq Wk^T; sup taken over realized logits"

    def to_dict(self) -> dict:
        return {"schema": 1, **asdict(self)}


def _scale(Wq, scale):
    return 1.0 / math.sqrt(Wq.shape[1]) if scale is None else float(scale)


def _check(X, Wq, Wk, Wv):
    X, Wq, Wk, Wv = (np.asarray(a, dtype=np.float64) for a in (X, Wq, Wk, Wv))
    if X.ndim != 2:
        raise ValueError("X must be (n, d)")
    d = X.shape[1]
    if Wq.shape[0] != d or Wk.shape[0] != d or Wv.shape[0] != d or Wq.shape != Wk.shape:
        raise ValueError(f"weight shapes {Wq.shape}, {Wk.shape}, {Wv.shape} do not fit d={d}")
    return X, Wq, Wk, Wv


def _sig(X, A, b):
    s = sigmoid_via_tanh(X @ A @ X.T + b)
    return s, s * (1.0 - s)


def sigmoid_attn_map(X, Wq, Wk, Wv, b: float = 0.0, scale: float | None = None) -> np.ndarray:
    X, Wq, Wk, Wv = _check(X, Wq, Wk, Wv)
    A = _scale(Wq, scale) * (Wq @ Wk.T)
    return _sig(X, A, b)[0] @ X @ Wv


def lipschitz_bound(Wq, Wk, Wv, X, b: float = 0.0, scale: float | None = None) -> LipschitzReport:
    X, Wq, Wk, Wv = _check(X, Wq, Wk, Wv)
    n = X.shape[0]
    s = _scale(Wq, scale)
    A = s * (Wq @ Wk.T)
    sig, dsig = _sig(X, A, b)
    sigma_inf = n * float(np.max(np.abs(sig)))
    sigma_prime_inf = n * float(np.max(np.abs(dsig)))
    a_spec = spectral_norm(A)
    mean_sq = float(np.mean(np.sum(X * X, axis=1)))
    wv = spectral_norm(Wv)
    bound = wv * (sigma_inf + 2.0 * sigma_prime_inf * a_spec * mean_sq)
    caps = (float(n), n / 4.0)
    return LipschitzReport(
        sigma_inf=sigma_inf, sigma_prime_inf=sigma_prime_inf, a_spec=a_spec, mean_sq_norm=mean_sq,
        wv_spec=wv, bound=bound, n=n, scale=s, bias=float(b),
        sigma_inf_cap=caps[0], sigma_prime_inf_cap=caps[1],
        bound_with_caps=wv * (caps[0] + 2.0 * caps[1] * a_spec * mean_sq),
    )


def attn_jacobian_apply(X, Delta, Wq, Wk, Wv, b: float = 0.0, scale: float | None = None) -> np.ndarray:
    """Directional derivative of ``sigmoid_attn_map`` at X along Delta.

    Row i is sum_j s'_ij (d_i.A x_j) x_j + sum_j s'_ij (x_i.A d_j) x_j
    + sum_j s_ij d_j, then multiplied by Wv.
    """
    X, Wq, Wk, Wv = _check(X, Wq, Wk, Wv)
    Delta = np.asarray(Delta, dtype=np.float64)
    if Delta.shape != X.shape:
        raise ValueError(f"Delta shape {Delta.shape} != X shape {X.shape}")
    A = _scale(Wq, scale) * (Wq @ Wk.T)
    sig, dsig = _sig(X, A, b)
    first = dsig * (Delta @ A @ X.T)
    second = dsig * (X @ A @ Delta.T)
    return ((first + second) @ X + sig @ Delta) @ Wv


def attn_jacobian_adjoint(X, G, Wq, Wk, Wv, b: float = 0.0, scale: float | None = None) -> np.ndarray:
    """J^T G computed by the reference attention backward pass."""
    X, Wq, Wk, Wv = _check(X, Wq, Wk, Wv)
    s = _scale(Wq, scale)
    cfg = AttnConfig(bias="constant", bias_value=float(b), scale=s)
    g = attn_backward(X @ Wq, X @ Wk, X @ Wv, np.asarray(G, dtype=np.float64), cfg)
    return g.dQ @ Wq.T + g.dK @ Wk.T + g.dV @ Wv.T


def dense_jacobian(X, Wq, Wk, Wv, b: float = 0.0, scale: float | None = None) -> np.ndarray:
    """Full Jacobian, shape (n*dv, n*d), one basis direction per column."""
    X = np.asarray(X, dtype=np.float64)
    cols = []
    for k in range(X.size):
        e = np.zeros(X.size)
        e[k] = 1.0
        cols.append(attn_jacobian_apply(X, e.reshape(X.shape), Wq, Wk, Wv, b, scale).ravel())
    return np.stack(cols, axis=1)


def empirical_jacobian_norm(X, Wq, Wk, Wv, b: float = 0.0, iters: int = 100, seed: int = 0,
                            scale: float | None = None, return_method: bool = False):
    """Power-iteration estimate of the Jacobian spectral norm at X.

    Small problems build the Jacobian explicitly; larger ones pair the
    forward-mode product with the backward pass as the adjoint.
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    X, Wq, Wk, Wv = _check(X, Wq, Wk, Wv)
    if X.size <= DENSE_JACOBIAN_MAX:
        J = dense_jacobian(X, Wq, Wk, Wv, b, scale)
        jv = lambda v: J @ v.ravel()
        jtu = lambda u: (J.T @ u).reshape(X.shape)
        method = "dense"
    else:
        jv = lambda v: attn_jacobian_apply(X, v, Wq, Wk, Wv, b, scale).ravel()
        jtu = lambda u: attn_jacobian_adjoint(X, u.reshape(X.shape[0], -1), Wq, Wk, Wv, b, scale)
        method = "backward-adjoint"
    v = np.random.default_rng(seed).standard_normal(X.shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        u = jv(v)
        est = float(np.linalg.norm(u))
        w = jtu(u)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
    est = max(est, float(np.linalg.norm(jv(v))))
    return (est, method) if return_method else est
