"""Training loop, metrics stream, length-generalization eval and param I/O."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..core import Rng
from .mlp import MLPConfig, init_mlp, matched_hidden, mlp_backward, mlp_forward
from .model import ModelConfig, backward, forward, init_params, loss_fn, param_count
from .optim import AdamState, adam_step, clip_by_global_norm, lr_at
from .tasks import TaskBatch, gen_ksum, gen_pair_repeat


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "ksum"
    n: int = 10
    k: int = 1
    vocab: int = 5
    len_range: tuple = (8, 10)
    max_len: int = 14

    def sample(self, batch: int, rng: Rng, length: int | None = None) -> TaskBatch:
        if self.kind == "ksum":
            return gen_ksum(self.n, self.k, batch, rng)
        lr = (length, length) if length is not None else tuple(self.len_range)
        return gen_pair_repeat(self.vocab, lr, self.max_len, batch, rng)

    def model_config(self, **kw) -> ModelConfig:
        if self.kind == "ksum":
            return ModelConfig(task="ksum", seq_len=2 * self.n, **kw)
        return ModelConfig(task="pair_repeat", seq_len=self.max_len, vocab=self.vocab, **kw)

    def mlp_config(self, hidden=None) -> MLPConfig:
        """MLP baseline; pair-repeat widths default to matching the transformer's parameter count."""
        if self.kind == "ksum":
            return MLPConfig("ksum", 2 * self.n, 0, tuple(hidden or (900, 300)))
        cfg = MLPConfig("pair_repeat", self.max_len, self.vocab, tuple(hidden or (1,)))
        if hidden is None:
            target = param_count(init_params(self.model_config(n_layers=2), Rng(0)))
            cfg = MLPConfig("pair_repeat", self.max_len, self.vocab, matched_hidden(target, cfg.in_dim))
        return cfg


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch: int = 32
    lr: float = 1e-3
    schedule: str = "constant"
    warmup_frac: float = 0.05
    clip: float | None = None
    log_every: int = 100
    seed: int = 0


@dataclass
class MetricsRecord:
    step: int
    loss: float
    accuracy: float | None
    attn_norm: list
    hoyer: list
    grad_norm: float
    lr: float


@dataclass
class TrainResult:
    params: dict
    records: list = field(default_factory=list)
    final_loss: float = math.nan
    samples: int = 0


def model_fns(cfg):
    """(init, forward, backward) for a transformer or MLP config."""
    if isinstance(cfg, MLPConfig):
        return init_mlp, mlp_forward, mlp_backward
    return init_params, forward, backward


def predict(params, cfg, inputs) -> np.ndarray:
    return model_fns(cfg)[1](params, cfg, inputs)[0]


def attn_metrics(P) -> tuple[float, float]:
    """Mean Frobenius norm per (batch, head) matrix and mean row Hoyer sparsity."""
    P = np.asarray(P, dtype=np.float64)
    fro = float(np.mean(np.sqrt(np.sum(P * P, axis=(-2, -1)))))
    rows = P.reshape(-1, P.shape[-1])
    n = rows.shape[1]
    l1 = rows.sum(axis=1)
    l2 = np.sqrt(np.sum(rows * rows, axis=1))
    ok = l2 > 0
    h = (math.sqrt(n) - l1[ok] / l2[ok]) / (math.sqrt(n) - 1.0)
    return fro, float(np.mean(np.clip(h, 0.0, 1.0))) if h.size else 0.0


def accuracy(cfg, logits, targets) -> float | None:
    if cfg.task != "pair_repeat":
        return None
    return float(np.mean((np.asarray(logits) > 0) == (np.asarray(targets) > 0.5)))


def train(task: TaskSpec, cfg, tcfg: TrainConfig, params=None, on_record=None) -> TrainResult:
    """Adam on freshly sampled batches.

    ``on_record(record, params)`` runs at every logged step with the parameters
    that produced that record; returning True stops training there.
    """
    root = Rng(tcfg.seed)
    init_rng, data_rng = root.spawn(0), root.spawn(1)
    init, fwd, bwd = model_fns(cfg)
    params = init(cfg, init_rng) if params is None else params
    state = AdamState.zeros_like(params)
    result = TrainResult(params)
    metric_cfg = replace(cfg, attn_impl="naive") if getattr(cfg, "attn_impl", "naive") != "naive" else cfg
    for step in range(tcfg.steps):
        batch = task.sample(tcfg.batch, data_rng)
        lr = lr_at(step, tcfg.steps, tcfg.lr, tcfg.schedule, tcfg.warmup_frac)
        logits, mats, cache = fwd(params, cfg, batch.inputs, keep_cache=True)
        loss, dlogits = loss_fn(cfg, logits, batch.targets)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr={lr})")
        grads, gnorm = clip_by_global_norm(bwd(params, cfg, cache, dlogits), tcfg.clip)
        last = step == tcfg.steps - 1
        if step % tcfg.log_every == 0 or last:
            if any(m is None for m in mats):
                mats = forward(params, metric_cfg, batch.inputs)[1]
            per = [attn_metrics(P) for P in mats]
            rec = MetricsRecord(step, loss, accuracy(cfg, logits, batch.targets), [a for a, _ in per],
                                [h for _, h in per], gnorm, lr)
            result.records.append(rec)
            if on_record is not None and on_record(rec, params):
                result.final_loss = loss
                break
        params, state = adam_step(params, grads, state, lr)
        result.final_loss = loss
        result.samples += tcfg.batch
    result.params = params
    return result


def evaluate(task: TaskSpec, cfg, params, samples: int, seed: int, length: int | None = None,
             chunk: int = 256) -> dict:
    """Loss and (for pair-repeat) accuracy on fresh samples."""
    rng = Rng(seed)
    losses, correct, seen = [], 0, 0
    while seen < samples:
        b = task.sample(min(chunk, samples - seen), rng, length)
        logits = predict(params, cfg, b.inputs)
        if cfg.task == "ksum":
            losses.append(float(np.sum((logits - b.targets) ** 2)))
        else:
            correct += int(np.sum((logits > 0) == (b.targets > 0.5)))
        seen += len(b.targets)
    if cfg.task == "ksum":
        return {"mse": sum(losses) / max(seen, 1), "samples": seen}
    return {"accuracy": correct / max(seen, 1), "samples": seen}


def eval_length_generalization(task: TaskSpec, cfg, params, lengths, samples: int,
                               seed: int = 0) -> dict[int, float]:
    if task.kind != "pair_repeat":
        raise ValueError("length generalization applies to pair_repeat")
    if samples <= 0:
        return {}
    out = {}
    for i, L in enumerate(lengths):
        if not 4 <= L <= cfg.seq_len:
            raise ValueError(f"length {L} outside [4, {cfg.seq_len}]")
        out[int(L)] = evaluate(task, cfg, params, samples, seed + 1000 * (i + 1), length=int(L))["accuracy"]
    return out


def falloff_report(acc: dict[int, float], trained_max: int, samples: int, sigmas: float = 3.0) -> dict:
    """Accuracy beyond the trained lengths should not rise by more than binomial noise."""
    beyond = sorted(L for L in acc if L > trained_max)
    viol = []
    for a, b in zip(beyond, beyond[1:]):
        p = max(acc[a], acc[b])
        tol = sigmas * math.sqrt(2 * p * (1 - p) / samples) if samples else 0.0
        if acc[b] > acc[a] + tol:
            viol.append((a, b))
    return {"lengths": beyond, "accuracy": [acc[L] for L in beyond], "monotone_or_flat": not viol,
            "violations": viol}


# ---------------------------------------------------------------- outputs


def metrics_header(n_layers: int, with_accuracy: bool) -> list[str]:
    cols = ["step", "loss"] + (["accuracy"] if with_accuracy else [])
    cols += [f"attn_norm_layer_{i}" for i in range(n_layers)] + [f"hoyer_layer_{i}" for i in range(n_layers)]
    return cols + ["grad_norm", "lr"]


def write_metrics_csv(path, records, n_layers: int, with_accuracy: bool):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(metrics_header(n_layers, with_accuracy))
        for r in records:
            row = [r.step, repr(r.loss)] + ([repr(r.accuracy)] if with_accuracy else [])
            row += [repr(v) for v in r.attn_norm] + [repr(v) for v in r.hoyer]
            w.writerow(row + [repr(r.grad_norm), repr(r.lr)])


def save_params(params, stem) -> tuple[Path, Path]:
    """Flat little-endian float64 blob plus a JSON manifest of names, shapes and offsets."""
    stem = Path(stem)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        a = np.asarray(params[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.ravel())
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    np.concatenate(chunks).tofile(bin_path) if chunks else bin_path.write_bytes(b"")
    json_path.write_text(json.dumps({"schema": 1, "dtype": "float64-le", "total": offset, "params": entries},
                                    indent=2, sort_keys=True))
    return bin_path, json_path


def load_params(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    flat = np.fromfile(stem.with_suffix(".bin"), dtype="<f8")
    if flat.size != meta["total"]:
        raise ValueError("param blob size does not match manifest")
    out = {}
    for e in meta["params"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = flat[e["offset"]: e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return out
