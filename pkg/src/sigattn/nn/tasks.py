"""Synthetic tasks: masked k-summation and first-pair repeat detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import Rng


@dataclass
class TaskBatch:
    inputs: np.ndarray
    targets: np.ndarray
    kind: str
    lengths: np.ndarray | None = None


def gen_ksum(n: int, k: int, batch: int, rng: Rng) -> TaskBatch:
    """Rows are n N(0,1) values followed by an n-dim k-hot mask; target is the masked sum."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    values = rng.gen.standard_normal((batch, n))
    mask = np.zeros((batch, n))
    if k:
        picks = np.argsort(rng.gen.random((batch, n)), axis=1)[:, :k]
        np.put_along_axis(mask, picks, 1.0, axis=1)
    targets = np.sum(values * mask, axis=1)
    return TaskBatch(np.concatenate([values, mask], axis=1), targets, "ksum")


def ksum_target(inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    n = x.shape[-1] // 2
    return np.sum(x[..., :n] * x[..., n:], axis=-1)


def pair_repeat_label(seq) -> int:
    """1 if some n > 1 has (s_n, s_{n+1}) == (s_0, s_1)."""
    s = list(seq)
    return int(any(s[i] == s[0] and s[i + 1] == s[1] for i in range(2, len(s) - 1)))


def gen_pair_repeat(vocab: int, len_range: tuple[int, int], max_len: int, batch: int, rng: Rng) -> TaskBatch:
    """Half positive, half negative; padding symbol is ``vocab``.

    Positives copy (s_0, s_1) to a uniform position n in [2, L-2]. Negatives
    are resampled until no pair repeats.
    """
    lo, hi = len_range
    if not (4 <= lo <= hi <= max_len) or vocab < 2:
        raise ValueError(f"need 4 <= {lo} <= {hi} <= {max_len} and vocab >= 2")
    if batch < 0:
        raise ValueError("batch must be >= 0")
    tokens = np.full((batch, max_len), vocab, dtype=np.int64)
    labels = np.zeros(batch)
    lengths = rng.gen.integers(lo, hi + 1, size=batch)
    want = np.zeros(batch, dtype=bool)
    want[: batch // 2] = True
    if batch % 2:
        want[-1] = bool(rng.gen.integers(0, 2))
    rng.gen.shuffle(want)
    for b in range(batch):
        L = int(lengths[b])
        while True:
            s = rng.gen.integers(0, vocab, size=L)
            if want[b]:
                pos = int(rng.gen.integers(2, L - 1))
                s[pos:pos + 2] = s[0:2]
                break
            if not pair_repeat_label(s):
                break
        tokens[b, :L] = s
        labels[b] = pair_repeat_label(s)
    return TaskBatch(tokens, labels, "pair_repeat", lengths)
