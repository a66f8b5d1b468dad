"""Tiled sigmoid attention with activation recomputation.

The forward pass walks query blocks and, inside, key/value blocks, keeping
only block-sized scratch: no row max, no row sum and no logsumexp exist for
sigmoid. The backward pass walks key/value blocks in the outer loop and
recomputes each attention tile from Q and K, so the output O is never needed.

All scratch goes through :class:`MemTracker`, which counts floats so tests can
assert the memory contract instead of trusting it.
"""

from __future__ import annotations

import math
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attn import ALIBI_LOOKAHEAD_RATIO, AttnConfig, GradTriple, alibi_slopes, attn_backward, attn_forward

# Floats per n_q*n_k materialized by the reference path (S, activation, P/mask
# in the forward; S, activation, dA, dS, P, mask in the backward).
NAIVE_FWD_NSQ_BUFFERS = 3
NAIVE_BWD_NSQ_BUFFERS = 6


@dataclass(frozen=True)
class BlockSpec:
    b_r: int = 128
    b_c: int = 128

    def __post_init__(self):
        if self.b_r < 1 or self.b_c < 1:
            raise ValueError("block sizes must be >= 1")


DEFAULT_BLOCKS = BlockSpec(128, 128)
# narrower key/value tiles; a documented alternative to the default
NARROW_BLOCKS = BlockSpec(128, 64)


@dataclass
class MemReport:
    aux_floats: int = 0
    n_sq_materialized: bool = False
    block_pairs: int = 0
    skipped_blocks: int = 0
    flops: int = 0


class MemTracker:
    """Counts live and peak auxiliary floats across all scratch buffers."""

    def __init__(self, n_q: int, n_k: int, tile: int):
        self._lock = threading.Lock()
        self.live = 0
        self.peak = 0
        self.n_sq = n_q * n_k
        self.tile = tile
        self.materialized = False
        self.block_pairs = 0
        self.skipped = 0
        self.flops = 0

    def alloc(self, shape, dtype=np.float64) -> np.ndarray:
        buf = np.zeros(shape, dtype=dtype)
        with self._lock:
            self.live += buf.size
            self.peak = max(self.peak, self.live)
            if buf.size >= self.n_sq and buf.size > self.tile:
                self.materialized = True
        return buf

    def free(self, *bufs):
        with self._lock:
            for b in bufs:
                self.live -= b.size

    def count(self, pairs: int = 0, skipped: int = 0, flops: int = 0):
        with self._lock:
            self.block_pairs += pairs
            self.skipped += skipped
            self.flops += flops

    def report(self) -> MemReport:
        return MemReport(self.peak, self.materialized, self.block_pairs, self.skipped, self.flops)


def _check(Q, K, V, cfg: AttnConfig):
    if cfg.activation != "sigmoid":
        raise ValueError("tiled kernel supports sigmoid attention only; use attn_forward")
    if cfg.alpha != 0:
        raise ValueError("sequence-length normalization runs through the reference path")
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("tiled kernel expects 2-D Q, K, V")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if cfg.causal and Q.shape[0] != K.shape[0]:
        raise ValueError("causal attention needs equal query and key lengths")


class _Tile:
    """Per-worker block scratch plus the logic to fill one S/P tile."""

    def __init__(self, tracker: MemTracker, br: int, bc: int, d: int, dv: int, backward: bool):
        self.tracker = tracker
        self.S = tracker.alloc((br, bc))
        self.P = tracker.alloc((br, bc))
        self.mask = tracker.alloc((br, bc), dtype=bool)
        self.bufs = [self.S, self.P, self.mask]
        if backward:
            self.dP = tracker.alloc((br, bc))
            self.tq = tracker.alloc((br, d))
            self.tk = tracker.alloc((bc, d))
            self.tv = tracker.alloc((bc, dv))
            self.bufs += [self.dP, self.tq, self.tk, self.tv]
        else:
            self.acc = tracker.alloc((br, dv))
            self.tmp = tracker.alloc((br, dv))
            self.bufs += [self.acc, self.tmp]

    def release(self):
        self.tracker.free(*self.bufs)

    def fill(self, Qi, Kj, r0, c0, cfg: AttnConfig, scale, slope, n_k):
        """Write sigmoid(S_ij) into self.P; return (S, P, causal-partial?) views."""
        r, c = Qi.shape[0], Kj.shape[0]
        S, P = self.S[:r, :c], self.P[:r, :c]
        np.matmul(Qi, Kj.T, out=S)
        S *= scale
        rows = np.arange(r0, r0 + r)
        cols = np.arange(c0, c0 + c)
        if slope is not None:
            np.subtract.outer(rows.astype(np.float64), cols.astype(np.float64), out=P)
            P *= -slope
            if not cfg.causal:
                # keys ahead of the query get a gentler slope
                m = self.mask[:r, :c]
                np.greater(P, 0.0, out=m)
                np.multiply(P, -ALIBI_LOOKAHEAD_RATIO, out=P, where=m)
            S += P
        if cfg.bias != "none":
            S += _row_bias(cfg, rows, n_k)[:, None]
        np.multiply(S, 0.5, out=P)
        np.tanh(P, out=P)
        P += 1.0
        P *= 0.5
        partial = cfg.causal and c0 + c - 1 > r0
        if partial:
            m = self.mask[:r, :c]
            np.greater_equal.outer(rows, cols, out=m)
            P *= m
        self.tracker.count(pairs=1, flops=2 * r * c * Qi.shape[1] + 5 * r * c)
        return S, P


def _row_bias(cfg: AttnConfig, rows: np.ndarray, n_k: int) -> np.ndarray:
    if cfg.bias in ("constant", "learnable"):
        return np.full(rows.shape, float(cfg.bias_value))
    if cfg.bias == "neg_log_n":
        return np.full(rows.shape, -math.log(n_k))
    lens = np.minimum(rows + 1, n_k) if cfg.causal else np.full(rows.shape, n_k)
    return -np.log(lens.astype(np.float64))


def _blocks(n: int, b: int):
    return [(s, min(s + b, n)) for s in range(0, n, b)]


def _slope(cfg: AttnConfig, head: int):
    if cfg.pos_bias != "alibi":
        return None
    if not 0 <= head < cfg.num_heads:
        raise ValueError(f"head {head} out of range")
    return float(alibi_slopes(cfg.num_heads)[head])


def flash_forward(Q, K, V, cfg: AttnConfig, blocks: BlockSpec = DEFAULT_BLOCKS, head: int = 0,
                  order=None, threads: int = 1):
    """Tiled sigmoid attention forward. Returns ``(O, MemReport)``.

    ``order`` permutes the query-block schedule; ``threads > 1`` evaluates
    query blocks concurrently. Neither changes the result.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    _check(Q, K, V, cfg)
    n_q, d = Q.shape
    n_k, dv = V.shape
    br, bc = min(blocks.b_r, n_q), min(blocks.b_c, n_k)
    scale = cfg.scale_for(d)
    slope = _slope(cfg, head)
    tracker = MemTracker(n_q, n_k, br * bc)
    O = np.zeros((n_q, dv))
    row_blocks = _blocks(n_q, br)
    col_blocks = _blocks(n_k, bc)
    idx = list(range(len(row_blocks))) if order is None else list(order)
    if sorted(idx) != list(range(len(row_blocks))):
        raise ValueError("order must be a permutation of the query blocks")

    def run(i, tile: _Tile):
        r0, r1 = row_blocks[i]
        Qi = Q[r0:r1]
        acc = tile.acc[: r1 - r0]
        acc[...] = 0.0
        for c0, c1 in col_blocks:
            if cfg.causal and c0 > r1 - 1:
                tracker.count(skipped=1)
                continue
            _, P = tile.fill(Qi, K[c0:c1], r0, c0, cfg, scale, slope, n_k)
            tmp = tile.tmp[: r1 - r0]
            np.matmul(P, V[c0:c1], out=tmp)
            acc += tmp
            tracker.count(flops=2 * (r1 - r0) * (c1 - c0) * dv)
        O[r0:r1] = acc

    _schedule(idx, run, tracker, threads, lambda: _Tile(tracker, br, bc, d, dv, backward=False))
    return O, tracker.report()


def flash_backward(Q, K, V, dO, cfg: AttnConfig, blocks: BlockSpec = DEFAULT_BLOCKS, head: int = 0,
                   order=None, threads: int = 1):
    """Tiled sigmoid attention backward. Returns ``(GradTriple, MemReport)``.

    dQ is the only accumulator shared between key/value blocks; with
    ``threads > 1`` each worker accumulates a private dQ and the partials are
    reduced in a fixed order.
    """
    Q, K, V, dO = (np.asarray(a, dtype=np.float64) for a in (Q, K, V, dO))
    _check(Q, K, V, cfg)
    n_q, d = Q.shape
    n_k, dv = V.shape
    if dO.shape != (n_q, dv):
        raise ValueError(f"dO shape {dO.shape} != {(n_q, dv)}")
    br, bc = min(blocks.b_r, n_q), min(blocks.b_c, n_k)
    scale = cfg.scale_for(d)
    slope = _slope(cfg, head)
    tracker = MemTracker(n_q, n_k, br * bc)
    dQ, dK, dV = np.zeros((n_q, d)), np.zeros((n_k, d)), np.zeros((n_k, dv))
    row_blocks = _blocks(n_q, br)
    col_blocks = _blocks(n_k, bc)
    dbias = np.zeros(len(col_blocks))
    idx = list(range(len(col_blocks))) if order is None else list(order)
    if sorted(idx) != list(range(len(col_blocks))):
        raise ValueError("order must be a permutation of the key/value blocks")
    if not np.any(dO):
        return GradTriple(dQ, dK, dV, 0.0), tracker.report()

    def run(j, tile: _Tile, dQ_acc):
        c0, c1 = col_blocks[j]
        c = c1 - c0
        Kj, Vj = K[c0:c1], V[c0:c1]
        dKj, dVj = dK[c0:c1], dV[c0:c1]
        for r0, r1 in row_blocks:
            if cfg.causal and c0 > r1 - 1:
                tracker.count(skipped=1)
                continue
            r = r1 - r0
            Qi, dOi = Q[r0:r1], dO[r0:r1]
            S, P = tile.fill(Qi, Kj, r0, c0, cfg, scale, slope, n_k)
            tv = tile.tv[:c]
            np.matmul(P.T, dOi, out=tv)
            dVj += tv
            dP = tile.dP[:r, :c]
            np.matmul(dOi, Vj.T, out=dP)
            # dS = P * (1 - P) * dP, in place; S is free scratch by now
            dP *= P
            np.multiply(dP, P, out=S)
            dP -= S
            dbias[j] += dP.sum()
            tq = tile.tq[:r]
            np.matmul(dP, Kj, out=tq)
            tq *= scale
            dQ_acc[r0:r1] += tq
            tk = tile.tk[:c]
            np.matmul(dP.T, Qi, out=tk)
            tk *= scale
            dKj += tk
            tracker.count(flops=2 * r * c * (2 * dv + 2 * d) + 4 * r * c)

    def make_tile():
        return _Tile(tracker, br, bc, d, dv, backward=True)

    if threads <= 1:
        tile = make_tile()
        for j in idx:
            run(j, tile, dQ)
        tile.release()
    else:
        # Static round-robin split; each worker owns a private dQ that is
        # summed in worker order afterwards, so the result is deterministic.
        shards = [idx[w::threads] for w in range(threads) if idx[w::threads]]

        def work(shard):
            tile = make_tile()
            acc = tracker.alloc((n_q, d))
            for j in shard:
                run(j, tile, acc)
            tile.release()
            return acc

        with ThreadPoolExecutor(max_workers=len(shards)) as ex:
            partials = list(ex.map(work, shards))
        for acc in partials:
            dQ += acc
        tracker.free(*partials)
    return GradTriple(dQ, dK, dV, float(dbias.sum())), tracker.report()


def _schedule(idx, run, tracker: MemTracker, threads: int, make_tile):
    if threads <= 1:
        tile = make_tile()
        for i in idx:
            run(i, tile)
        tile.release()
        return
    local = threading.local()
    tiles = []
    tiles_lock = threading.Lock()

    def task(i):
        if not hasattr(local, "tile"):
            local.tile = make_tile()
            with tiles_lock:
                tiles.append(local.tile)
        run(i, local.tile)

    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(task, idx))
    for t in tiles:
        t.release()


def kernel_bench(n: int, d: int, blocks: BlockSpec = DEFAULT_BLOCKS, reps: int = 5,
                 naive_max_n: int = 4096, seed: int = 0, cfg: AttnConfig | None = None,
                 threads: int = 1) -> list[dict]:
    """Median wall time of naive vs tiled forward/backward at one size.

    Rows above ``naive_max_n`` skip the naive path and report its projected
    n*n allocation instead.
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    cfg = cfg or AttnConfig(bias="neg_log_n")
    r = np.random.default_rng(seed)
    Q, K, V, dO = (r.standard_normal((n, d)) for _ in range(4))

    def timed(fn):
        samples = []
        out = None
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            out = fn()
            samples.append(time.perf_counter_ns() - t0)
        return samples, out

    rows = []
    base = {"n": n, "d": d, "b_r": blocks.b_r, "b_c": blocks.b_c}
    for kind, buffers in (("forward", NAIVE_FWD_NSQ_BUFFERS), ("backward", NAIVE_BWD_NSQ_BUFFERS)):
        projected = buffers * n * n
        if n <= naive_max_n:
            fn = (lambda: attn_forward(Q, K, V, cfg)) if kind == "forward" else (lambda: attn_backward(Q, K, V, dO, cfg))
            samples, _ = timed(fn)
            rows.append({"path": f"naive_{kind}", **base, "median_ns": int(statistics.median(samples)),
                         "aux_floats": projected, "status": "ok", "samples": samples})
        else:
            rows.append({"path": f"naive_{kind}", **base, "median_ns": "", "aux_floats": projected,
                         "status": "skipped", "samples": []})
        if kind == "forward":
            fn = lambda: flash_forward(Q, K, V, cfg, blocks, threads=threads)[1]
        else:
            fn = lambda: flash_backward(Q, K, V, dO, cfg, blocks, threads=threads)[1]
        samples, mem = timed(fn)
        rows.append({"path": f"flash_{kind}", **base, "median_ns": int(statistics.median(samples)),
                     "aux_floats": mem.aux_floats, "status": "ok", "samples": samples})
    return rows
