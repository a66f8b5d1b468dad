"""Contextual mapping built from Heaviside-activated attention heads.

Inputs are sequences of n distinct points of the grid {0, delta, ..., 1-delta}^d.
Each point is reduced to the scalar index l = u.x with
u = [1, 1/delta, ..., delta^(1-d)]. A stack of selective shifts, one per grid
index, followed by a global shift maps every sequence to a vector q whose
entries are distinct within and across sequences.

With delta a negative power of two and integer c every quantity here is an
exact float64 as long as it stays below 2^53; past that the same layers run on
``fractions.Fraction`` so distinctness is always tested with exact equality.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

ENUM_BUDGET = 100_000
FLOAT_EXACT_LIMIT = 2.0**53


def heaviside(x):
    """Step function with H(0) = 1/2; object arrays stay exact."""
    x = np.asarray(x)
    if x.dtype == object:
        half = np.full(x.shape, Fraction(1, 2), dtype=object)
        return np.where(x > 0, 1, np.where(x < 0, 0, half)).astype(object)
    return np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))


def c_threshold(delta: float, d: int, n: int) -> float:
    """c must exceed (n-1)(delta^-d - 1) * C(n-1, ceil((n-1)/2))."""
    g = grid_points(delta, d)
    return (n - 1) * (g - 1) * math.comb(n - 1, math.ceil((n - 1) / 2))


def grid_points(delta: float, d: int) -> int:
    inv = round(1.0 / delta)
    if inv < 2 or abs(inv * delta - 1.0) > 1e-12:
        raise ValueError("1/delta must be an integer >= 2")
    return inv**d


def _u(delta, d: int) -> np.ndarray:
    if isinstance(delta, Fraction):
        return np.array([delta ** (-k) for k in range(d)], dtype=object)
    return np.array([delta ** (-k) for k in range(d)])


def needs_exact(delta: float, n: int, c: float) -> bool:
    """True when q(X) may leave the range where float64 integers are exact."""
    return float(c) ** (2 * n + 2) / delta >= FLOAT_EXACT_LIMIT


@dataclass(frozen=True)
class GridSeq:
    """n distinct grid points as the rows of ``columns`` (shape (n, d))."""

    delta: float
    columns: np.ndarray = field(repr=False)

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=np.float64)
        if cols.ndim != 2:
            raise ValueError("columns must be (n, d)")
        object.__setattr__(self, "columns", cols)
        steps = cols / self.delta
        if np.any(np.abs(steps - np.round(steps)) > 1e-9) or np.any(cols < 0) or np.any(cols > 1 - self.delta + 1e-12):
            raise ValueError("every coordinate must lie in {0, delta, ..., 1-delta}")
        l = self.indices()
        if np.any(np.diff(l) <= 0):
            raise ValueError("columns must be distinct and ordered by scalar index")

    @property
    def n(self) -> int:
        return self.columns.shape[0]

    @property
    def d(self) -> int:
        return self.columns.shape[1]

    def indices(self) -> np.ndarray:
        return self.columns @ _u(self.delta, self.d)

    @classmethod
    def from_grid_ids(cls, delta: float, d: int, ids) -> "GridSeq":
        """Build from integer grid ids; id digits in base 1/delta are the coordinates."""
        base = round(1.0 / delta)
        cols = []
        for g in ids:
            digits = []
            for _ in range(d):
                g, r = divmod(int(g), base)
                digits.append(r * delta)
            cols.append(digits)
        return cls(delta, np.array(cols, dtype=np.float64))


def psi_head(l: np.ndarray, b_q: float, b_k: float) -> np.ndarray:
    """One Heaviside head: entry j is sum_k l_k H((l_k - b_q)(l_j - b_k))."""
    gate = heaviside(np.multiply.outer(l - b_q, l - b_k))
    return l @ gate


def selective_shift(X: np.ndarray, i: int, delta: float, c: float) -> np.ndarray:
    """Four-head layer that adds c * sum_{l_k > i delta} l_k to the column at index i delta."""
    l = X @ _u(delta, X.shape[1])
    # written without float literals so Fraction inputs stay exact
    lo, hi = (2 * i - 1) * delta / 2, (2 * i + 1) * delta / 2
    upd = psi_head(l, 0, lo) - psi_head(l, 0, hi) - psi_head(l, hi, hi) + psi_head(l, hi, lo)
    out = X.copy()
    out[:, 0] += c * upd / 2
    return out


def global_shift(X: np.ndarray, delta: float, c: float) -> np.ndarray:
    n = X.shape[0]
    l = X @ _u(delta, X.shape[1])
    out = X.copy()
    out[:, 0] += c ** (n + 1) * psi_head(l, (2 * c**n + 1) * delta / 2, 0)
    return out


def selective_shift_stack(X: GridSeq, c: float, check_c: bool = True, return_ltilde: bool = False,
                          exact: bool | None = None):
    """q(X) after every selective shift and the final global shift.

    ``exact`` selects Fraction arithmetic; by default it is used only when
    float64 could round.
    """
    if check_c and not c > c_threshold(X.delta, X.d, X.n):
        raise ValueError(f"c={c} does not exceed threshold {c_threshold(X.delta, X.d, X.n)}")
    if exact is None:
        exact = needs_exact(X.delta, X.n, c)
    delta, M = X.delta, X.columns.copy()
    if exact:
        inv = round(1.0 / X.delta)
        delta = Fraction(1, inv)
        M = np.array([[Fraction(round(v * inv), inv) for v in row] for row in X.columns], dtype=object)
        c = Fraction(c)
    u = _u(delta, X.d)
    for i in range(grid_points(X.delta, X.d)):
        M = selective_shift(M, i, delta, c)
    ltilde = M @ u
    q = global_shift(M, delta, c) @ u
    return (q, ltilde) if return_ltilde else q


def ltilde_closed_form(l, c: float, printed: bool = False) -> np.ndarray:
    """Closed form of the indices after all selective shifts (1-based j).

    l~_j = l_j + c s_j + sum_{i=0}^{j-2} c^(i+2) sum_{k=i}^{j-2} C(k,i) s_(j-1-k)
    with s_j = sum(l) - l_j. ``printed=True`` uses s_(k-i+1) in the inner sum
    instead; the two agree for n <= 3 only.
    """
    l = list(l)
    n = len(l)
    total = sum(l)
    s = [None] + [total - v for v in l]  # 1-based
    out = []
    for j in range(1, n + 1):
        v = l[j - 1] + c * s[j]
        for i in range(0, j - 1):
            inner = sum(math.comb(k, i) * s[k - i + 1 if printed else j - 1 - k] for k in range(i, j - 1))
            v += c ** (i + 2) * inner
        out.append(v)
    return np.array(out)


@dataclass
class ContextualReport:
    delta: float
    d: int
    n: int
    c: float
    threshold: float
    precondition_ok: bool
    sequences: int
    within_violations: int
    cross_violations: int
    monotone_violations: int
    bound_violations: int
    closed_form_mismatches: int
    min_separation: float
    first_failure: str | None = None
    arithmetic: str = "float64"

    @property
    def passed(self) -> bool:
        return (self.precondition_ok and self.within_violations == 0 and self.cross_violations == 0
                and self.monotone_violations == 0 and self.bound_violations == 0
                and self.closed_form_mismatches == 0)

    def to_dict(self) -> dict:
        return {"schema": 1, **asdict(self), "passed": self.passed}


def contextual_mapping_check(delta: float, d: int, n: int, c: float | None = None,
                             budget: int = ENUM_BUDGET) -> ContextualReport:
    """Enumerate every ordered sequence of n distinct grid points and test q.

    With ``c`` unset the smallest integer above the threshold is used. A c at
    or below the threshold is still enumerated so the report shows what breaks.
    """
    g = grid_points(delta, d)
    if n < 2 or n > g:
        raise ValueError(f"need 2 <= n <= {g}")
    total = math.comb(g, n)
    if total > budget:
        raise ValueError(f"enumeration of {total} sequences exceeds budget {budget}")
    thr = c_threshold(delta, d, n)
    c = float(math.floor(thr) + 1) if c is None else float(c)
    ok = c > thr
    within = cross = mono = bounds = mism = 0
    first = None if ok else f"precondition: c={c} <= threshold {thr}"
    exact = needs_exact(delta, n, c)
    cc = Fraction(c) if exact else c
    dd = Fraction(1, round(1.0 / delta)) if exact else delta
    values, owners = [], []
    for sid, ids in enumerate(itertools.combinations(range(g), n)):
        X = GridSeq.from_grid_ids(delta, d, ids)
        q, lt = selective_shift_stack(X, c, check_c=False, return_ltilde=True, exact=exact)
        l = [Fraction(round(v / delta)) * dd for v in X.indices()] if exact else X.indices()
        if len(set(q.tolist())) != n:
            within += 1
            first = first or f"within-sequence collision for grid ids {ids}"
        if np.any(np.diff(lt) <= 0):
            mono += 1
        for j in range(2, n):  # 1-based j with 1 < j < n
            if not cc**j * dd < lt[j - 1] < cc ** (j + 1) * dd:
                bounds += 1
        if list(lt) != list(ltilde_closed_form(l, cc)):
            mism += 1
        values.extend(q.tolist())
        owners.extend([sid] * n)
    pairs = sorted(zip(values, owners))
    gaps = [b[0] - a[0] for a, b in zip(pairs, pairs[1:])]
    cross = sum(1 for a, b in zip(pairs, pairs[1:]) if a[0] == b[0] and a[1] != b[1])
    if cross and first is None:
        first = "cross-sequence collision"
    return ContextualReport(
        delta=delta, d=d, n=n, c=c, threshold=float(thr), precondition_ok=ok, sequences=total,
        within_violations=within, cross_violations=cross, monotone_violations=mono,
        bound_violations=bounds, closed_form_mismatches=mism,
        min_separation=float(min(gaps)) if gaps else math.inf, first_failure=first,
        arithmetic="fraction" if exact else "float64",
    )
