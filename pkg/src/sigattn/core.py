"""Dense float64 linear algebra and scalar activations shared by every module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major).
The helpers here validate shapes and finiteness and keep the numerics in
double precision so finite-difference checks stay meaningful.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Return ``a`` as a finite 2-D float64 array, raising on bad input."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"{name}: expected 2-D array, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name}: non-finite values")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def sigmoid_via_tanh(x):
    """Logistic sigmoid written as 0.5 * (1 + tanh(x / 2)).

    Works on scalars and arrays. The tanh form never overflows, so large
    negative logits need no special casing.
    """
    if np.isscalar(x):
        return float(0.5 * (1.0 + np.tanh(0.5 * float(x))))
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def row_softmax(m: Matrix, mask: Matrix | None = None) -> Matrix:
    """Row-wise softmax; ``mask`` entries equal to 0 are treated as -inf logits.

    Works on any array whose last axis is the row.
    """
    m = np.asarray(m, dtype=np.float64)
    if mask is None:
        shifted = m - m.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    keep = np.broadcast_to(np.asarray(mask) != 0, m.shape)
    if not np.all(keep.any(axis=-1)):
        raise ValueError("row_softmax: fully masked row")
    masked = np.where(keep, m, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def frobenius_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(m * m)))


def spectral_norm(m: Matrix, iters: int = 1000, tol: float = 1e-12) -> float:
    """Largest singular value by power iteration on m^T m."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ValueError("spectral_norm: empty matrix")
    if iters < 1:
        raise ValueError("spectral_norm: iters must be >= 1")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if not np.any(m):
        return 0.0
    # fixed start vector so results are reproducible
    v = np.random.default_rng(0).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = m.T @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector landed in the null space; restart on a basis vector
            v = np.zeros_like(v)
            v[int(np.argmax(np.abs(m).sum(axis=0)))] = 1.0
            continue
        v = w / nw
        new = float(np.linalg.norm(m @ v))
        if abs(new - est) < tol:
            return new
        est = new
    return est


class Rng:
    """Seeded generator; same seed gives the same stream.

    Backed by numpy's PCG64 bit generator.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0,
               truncate_at: float | None = None) -> Matrix:
        if std < 0:
            raise ValueError("std must be >= 0")
        out = mean + std * self.gen.standard_normal((rows, cols))
        if truncate_at is None or std == 0:
            return out
        lim = truncate_at * std
        bad = np.abs(out - mean) > lim
        for _ in range(100):
            if not bad.any():
                break
            out[bad] = mean + std * self.gen.standard_normal(int(bad.sum()))
            bad = np.abs(out - mean) > lim
        return np.clip(out, mean - lim, mean + lim)

    def trunc_normal(self, shape, std: float = 0.02, truncate_at: float = 2.0) -> np.ndarray:
        """``trunc_normal(std)`` initializer for arbitrary shapes."""
        shape = tuple(np.atleast_1d(shape))
        size = int(np.prod(shape))
        return self.normal(1, size, 0.0, std, truncate_at).reshape(shape)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream derived from this seed."""
        return Rng((self.seed * 1_000_003 + offset) % 2**64)
