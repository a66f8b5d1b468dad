"""Command line entry point.

    sigattn equiv | checkgrad | theory {bias,lipschitz,contextual,flops,hoyer}
            | train {ksum,pair-repeat} | bench

Every command accepts --config FILE (JSON with flag names as keys; the
command line wins), --seed, --threads and --out. Each run writes
``resolved_config.json`` into --out next to its other outputs. Exit codes:
0 pass, 1 check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

SCHEMA = 1
INTERNAL = {"config", "out", "func", "leaf", "command"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- flag parsing


def int_list(text) -> list[int]:
    """'16,130' or '6..14' (inclusive) or a JSON list."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    text = str(text).strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def block_pair(text) -> tuple[int, int]:
    vals = int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("blocks take the form B_r,B_c")
    return vals[0], vals[1]


def bias_spec(text) -> tuple[str, float]:
    """none | const:V | neg_log_n | neg_log_rowlen | learnable[:V]."""
    if isinstance(text, (list, tuple)):
        return str(text[0]), float(text[1])
    name, _, val = str(text).partition(":")
    name = {"const": "constant"}.get(name, name)
    if name not in ("none", "constant", "neg_log_n", "neg_log_rowlen", "learnable"):
        raise argparse.ArgumentTypeError(f"unknown bias {text!r}")
    if name == "constant" and not val:
        raise argparse.ArgumentTypeError("constant bias needs a value, e.g. const:-4")
    try:
        return name, float(val) if val else 0.0
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad bias value in {text!r}") from None


def opt_float(text):
    if text is None or str(text).lower() == "none":
        return None
    return float(text)


def _common(p: argparse.ArgumentParser, command: str):
    p.add_argument("--config", help="JSON file of flag values; command-line flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker cap for the tiled kernels")
    p.add_argument("--out", default=None, help=f"output directory (default runs/{command})")
    p.set_defaults(leaf=p, command=command)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sigattn", description="Sigmoid attention kernels, checks and experiments.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("equiv", help="tiled vs reference kernels over block shapes")
    p.add_argument("--n", type=int_list, default="16,130,257", help="sequence lengths")
    p.add_argument("--blocks", type=block_pair, default=None, help="one B_r,B_c pair instead of the grid")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-10)
    _common(p, "equiv")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("checkgrad", help="analytic gradients vs central differences")
    p.add_argument("--activation", choices=["both", "sigmoid", "softmax"], default="both")
    p.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--attn-tol", type=float, default=1e-6)
    p.add_argument("--model-tol", type=float, default=1e-5)
    _common(p, "checkgrad")
    p.set_defaults(func=cmd_checkgrad)

    th = sub.add_parser("theory", help="computable theory checks").add_subparsers(dest="which", required=True)
    p = th.add_parser("bias", help="bias that makes a sigmoid row sum to one")
    p.add_argument("--n", type=int, default=None, help="row length; a single --z value is repeated n times")
    p.add_argument("--z", type=float_list, default="0", help="comma-separated logits")
    _common(p, "theory-bias")
    p.set_defaults(func=cmd_theory_bias)

    p = th.add_parser("lipschitz", help="empirical Jacobian norm vs the analytic bound")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--d-max", type=int, default=4)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--radii", type=float_list, default="1,2,4", help="input scales R")
    _common(p, "theory-lipschitz")
    p.set_defaults(func=cmd_theory_lipschitz)

    p = th.add_parser("contextual", help="exhaustive contextual-mapping check")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--c", type=float, default=None, help="defaults to the smallest integer above the threshold")
    p.add_argument("--budget", type=int, default=100_000)
    _common(p, "theory-contextual")
    p.set_defaults(func=cmd_theory_contextual)

    p = th.add_parser("flops", help="forward flops per token per head")
    p.add_argument("--nctx", type=int, default=2048)
    p.add_argument("--dhead", type=int, default=64)
    p.add_argument("--causal", action="store_true")
    _common(p, "theory-flops")
    p.set_defaults(func=cmd_theory_flops)

    p = th.add_parser("hoyer", help="Hoyer sparsity of a vector")
    p.add_argument("--values", type=float_list, required=False, default=None)
    _common(p, "theory-hoyer")
    p.set_defaults(func=cmd_theory_hoyer)

    tr = sub.add_parser("train", help="synthetic-task training").add_subparsers(dest="task", required=True)
    for task in ("ksum", "pair-repeat"):
        p = tr.add_parser(task)
        if task == "ksum":
            p.add_argument("--n", type=int, default=10, help="values per input (input dim is 2n)")
            p.add_argument("--k", type=int, default=1)
        else:
            p.add_argument("--vocab", type=int, default=5)
            p.add_argument("--len-range", type=block_pair, default="8,10", help="lo,hi train lengths")
            p.add_argument("--max-len", type=int, default=14)
            p.add_argument("--eval-lengths", type=int_list, default=None, help="e.g. 6..14")
            p.add_argument("--eval-samples", type=int, default=1000)
        p.add_argument("--model", choices=["transformer", "mlp"], default="transformer")
        p.add_argument("--mlp-hidden", type=int_list, default=None)
        p.add_argument("--attn", choices=["sigmoid", "softmax"], default="sigmoid")
        p.add_argument("--bias", type=bias_spec, default="none", help="none|const:V|neg_log_n|neg_log_rowlen|learnable:V")
        p.add_argument("--alpha", type=float, default=0.0)
        p.add_argument("--pos", choices=["none", "learnable", "sincos", "rope", "alibi"], default="learnable")
        p.add_argument("--qk-norm", action="store_true")
        p.add_argument("--layerscale", type=opt_float, default=1e-4, help="init value or 'none'")
        p.add_argument("--d-model", type=int, default=64)
        p.add_argument("--heads", type=int, default=4)
        p.add_argument("--layers", type=int, default=1 if task == "ksum" else 2)
        p.add_argument("--attn-impl", choices=["naive", "flash"], default="naive")
        p.add_argument("--steps", type=int, default=1000)
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--schedule", choices=["constant", "cosine"], default="constant")
        p.add_argument("--warmup-frac", type=float, default=0.05)
        p.add_argument("--clip", type=opt_float, default=None)
        p.add_argument("--log-every", type=int, default=100)
        p.add_argument("--final-eval-samples", type=int, default=4096)
        _common(p, f"train-{task}")
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="naive vs tiled timing and memory")
    p.add_argument("--n", type=int_list, default="512,2048")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--blocks", type=block_pair, default="128,128")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--naive-max-n", type=int, default=4096)
    _common(p, "bench")
    p.set_defaults(func=cmd_bench)
    return parser


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    leaf = args.leaf
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        leaf.error(f"cannot read config {args.config}: {e}")
    if not isinstance(data, dict):
        leaf.error("config file must hold a JSON object")
    data = dict(data)
    data.pop("schema", None)
    if data.pop("command", args.command) != args.command:
        leaf.error(f"config was written for a different command than {args.command}")
    known = {a.dest for a in leaf._actions} - INTERNAL - {"help"}
    values = {}
    for key, val in data.items():
        dest = key.replace("-", "_")
        if dest not in known:
            leaf.error(f"unknown config key {key!r}")
        values[dest] = val
    leaf.set_defaults(**values)
    args = parser.parse_args(argv)
    # defaults coming from JSON bypass argparse's type conversion
    for action in leaf._actions:
        v = getattr(args, action.dest, None)
        if action.dest in values and action.type is not None and v is not None and not isinstance(v, str):
            try:
                setattr(args, action.dest, action.type(v))
            except (TypeError, ValueError, argparse.ArgumentTypeError) as e:
                leaf.error(f"bad config value for {action.dest}: {e}")
        if action.dest in values and action.choices is not None and getattr(args, action.dest) not in action.choices:
            leaf.error(f"config value for {action.dest} must be one of {list(action.choices)}")
    return args


def resolved(args) -> dict:
    out = {k: v for k, v in vars(args).items() if k not in INTERNAL and k not in ("cmd", "which", "task")}
    out = {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
    return {"schema": SCHEMA, "command": args.command, **dict(sorted(out.items()))}


def out_dir(args) -> Path:
    d = Path(args.out) if args.out else Path("runs") / args.command
    d.mkdir(parents=True, exist_ok=True)
    (d / "resolved_config.json").write_text(json.dumps(resolved(args), indent=2) + "\n")
    return d


def write_json(path: Path, obj):
    path.write_text(json.dumps({"schema": SCHEMA, **obj}, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _positive(name, v):
    if v < 1:
        raise UsageError(f"--{name.replace('_', '-')} must be >= 1")


# ---------------------------------------------------------------- commands


def cmd_equiv(args) -> int:
    from .checks import equivalence_suite

    for n in args.n:
        _positive("n", n)
    if not args.n:
        raise UsageError("--n needs at least one length")
    _positive("d", args.d)
    _positive("threads", args.threads)
    if args.blocks is not None:
        _positive("blocks", min(args.blocks))
    rows = equivalence_suite(args.n, None if args.blocks is None else [args.blocks], d=args.d, seed=args.seed,
                             threads=args.threads)
    worst = {}
    for r in rows:
        key = (r.n, r.config)
        if key not in worst or r.max_err > worst[key].max_err:
            worst[key] = r
    print(f"{'n':>5} {'config':<22} {'shapes':>6} {'worst b_r,b_c':>14} {'max_abs_err':>12}")
    for (n, name), r in worst.items():
        shapes = sum(1 for x in rows if (x.n, x.config) == (n, name))
        print(f"{n:>5} {name:<22} {shapes:>6} {f'{r.b_r},{r.b_c}':>14} {r.max_err:>12.3e}")
    top = max(r.max_err for r in rows)
    ok = top <= args.tol
    d = out_dir(args)
    write_csv(d / "equiv.csv", ["n", "config", "b_r", "b_c", "max_abs_err"],
              [(r.n, r.config, r.b_r, r.b_c, r.max_err) for r in rows])
    write_json(d / "equiv.json", {"cases": len(rows), "max_abs_err": top, "tol": args.tol, "passed": ok})
    print(f"{'PASS' if ok else 'FAIL'}: max abs error {top:.3e} over {len(rows)} cases (tol {args.tol:g})")
    return 0 if ok else 1


def cmd_checkgrad(args) -> int:
    from .checks import gradcheck_suite, gradrow_ok, relaxed

    if args.h <= 0:
        raise UsageError("--h must be positive")
    acts = ("sigmoid", "softmax") if args.activation == "both" else (args.activation,)
    rows = gradcheck_suite(acts, h=args.h, seed=args.seed)
    atol, mtol = relaxed(args.attn_tol, args.h), relaxed(args.model_tol, args.h)
    fmt = lambda v: "-" if v is None else f"{v:.2e}"
    print(f"{'activation':<10} {'axis':<20} {'attn':>9} {'flash':>9} {'model':>9}  ok")
    ok_all = True
    for r in rows:
        ok = gradrow_ok(r, args.h, args.attn_tol, args.model_tol)
        ok_all &= ok
        print(f"{r.activation:<10} {r.axis:<20} {fmt(r.attn_naive):>9} {fmt(r.attn_flash):>9} {fmt(r.model):>9}  "
              f"{'yes' if ok else 'NO'}")
    d = out_dir(args)
    write_csv(d / "checkgrad.csv", ["activation", "axis", "attn_naive", "attn_flash", "model"],
              [(r.activation, r.axis, r.attn_naive, "" if r.attn_flash is None else r.attn_flash, r.model)
               for r in rows])
    write_json(d / "checkgrad.json", {"h": args.h, "attn_tol": atol, "model_tol": mtol, "rows": len(rows),
                                      "worst_attn": max(max(r.attn_naive, r.attn_flash or 0.0) for r in rows),
                                      "worst_model": max(r.model for r in rows), "passed": ok_all})
    print(f"{'PASS' if ok_all else 'FAIL'}: thresholds attention {atol:g}, model {mtol:g}")
    return 0 if ok_all else 1


def cmd_theory_bias(args) -> int:
    from .core import sigmoid_via_tanh
    from .theory import bias_bracket, order_optimal_bias, solve_bias

    z = list(args.z)
    if args.n is not None:
        if len(z) == 1:
            z = z * args.n
        elif len(z) != args.n:
            raise UsageError(f"--n {args.n} does not match {len(z)} logits")
    if len(z) < 2:
        raise UsageError("need at least two logits")
    b = solve_bias(z)
    lo, hi = bias_bracket(z)
    resid = float(np.sum(sigmoid_via_tanh(np.asarray(z) + b)) - 1.0)
    ok = lo <= b <= hi and abs(resid) <= 1e-12
    report = {"n": len(z), "b": b, "bracket": [lo, hi], "mass_residual": resid,
              "order_optimal_b": order_optimal_bias(z), "passed": ok}
    write_json(out_dir(args) / "bias.json", report)
    print(json.dumps({"schema": SCHEMA, **report}, indent=2, sort_keys=True))
    return 0 if ok else 1


def cmd_theory_lipschitz(args) -> int:
    from .theory import empirical_jacobian_norm, lipschitz_bound

    _positive("instances", args.instances)
    if args.n_max < 2 or args.d_max < 1:
        raise UsageError("need --n-max >= 2 and --d-max >= 1")
    r = np.random.default_rng(args.seed)
    worst, violations, cases = 0.0, [], 0
    for i in range(args.instances):
        n, d = int(r.integers(2, args.n_max + 1)), int(r.integers(1, args.d_max + 1))
        X = r.standard_normal((n, d))
        Wq, Wk, Wv = (r.standard_normal((d, d)) / math.sqrt(d) for _ in range(3))
        for R in args.radii:
            XR = R * X / max(np.max(np.linalg.norm(X, axis=1)), 1e-300)
            emp = empirical_jacobian_norm(XR, Wq, Wk, Wv, args.bias, iters=args.iters, seed=i)
            bound = lipschitz_bound(Wq, Wk, Wv, XR, args.bias).bound
            cases += 1
            worst = max(worst, emp / bound)
            if emp > bound:
                violations.append({"instance": i, "R": R, "empirical": emp, "bound": bound})
    report = {"cases": cases, "max_ratio": worst, "violations": violations, "passed": not violations}
    write_json(out_dir(args) / "lipschitz.json", report)
    print(json.dumps({"schema": SCHEMA, **report}, indent=2, sort_keys=True))
    return 0 if not violations else 1


def cmd_theory_contextual(args) -> int:
    from .theory import contextual_mapping_check

    try:
        rep = contextual_mapping_check(args.delta, args.d, args.n, args.c, budget=args.budget)
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_json(out_dir(args) / "contextual.json", rep.to_dict())
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    print("both properties hold" if rep.passed else f"check failed: {rep.first_failure}")
    return 0 if rep.passed else 1


def cmd_theory_flops(args) -> int:
    from .theory import flop_count

    _positive("nctx", args.nctx)
    _positive("dhead", args.dhead)
    report = {"n_ctx": args.nctx, "d_head": args.dhead, "causal": args.causal}
    for act in ("softmax", "sigmoid"):
        fc = flop_count(args.nctx, args.dhead, args.causal, act)
        report[act] = {"logits": str(fc.logits), "activation": str(fc.activation), "delta": str(fc.delta),
                       "c": str(fc.c)}
    s, x = report["sigmoid"], report["softmax"]
    print(f"logits {s['logits']}  softmax {x['activation']}  sigmoid {s['activation']}  delta {s['delta']}  c {s['c']}")
    write_json(out_dir(args) / "flops.json", report)
    return 0


def cmd_theory_hoyer(args) -> int:
    from .theory import hoyer_sparsity

    if not args.values:
        raise UsageError("--values needs at least one number")
    try:
        h = hoyer_sparsity(args.values)
    except ValueError as e:
        raise UsageError(str(e)) from None
    write_json(out_dir(args) / "hoyer.json", {"values": list(args.values), "hoyer": h})
    print(json.dumps({"schema": SCHEMA, "hoyer": h}))
    return 0


def cmd_train(args) -> int:
    from .core import Rng
    from .nn import (
        TaskSpec, TrainConfig, TrainingDiverged, eval_length_generalization, evaluate, falloff_report,
        mlp_param_count, param_count, save_params, train, write_metrics_csv,
    )

    for name in ("steps", "batch", "log_every", "d_model", "heads", "layers"):
        _positive(name, getattr(args, name))
    if args.command == "train-ksum":
        task = TaskSpec("ksum", n=args.n, k=args.k)
    else:
        task = TaskSpec("pair_repeat", vocab=args.vocab, len_range=tuple(args.len_range), max_len=args.max_len)
    bias, bias_val = args.bias
    try:
        if args.model == "mlp":
            cfg = task.mlp_config(tuple(args.mlp_hidden) if args.mlp_hidden else None)
            n_params = mlp_param_count(cfg.in_dim, cfg.hidden)
        else:
            cfg = task.model_config(
                d_model=args.d_model, n_heads=args.heads, n_layers=args.layers, activation=args.attn, bias=bias,
                bias_init=bias_val, alpha=args.alpha, pos=args.pos, qk_norm=args.qk_norm,
                layerscale=args.layerscale, attn_impl=args.attn_impl)
            n_params = None
        tcfg = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, schedule=args.schedule,
                           warmup_frac=args.warmup_frac, clip=args.clip, log_every=args.log_every, seed=args.seed)
        task.sample(1, Rng(0))  # validates the task ranges before any output is written
    except ValueError as e:
        raise UsageError(str(e)) from None
    d = out_dir(args)
    try:
        res = train(task, cfg, tcfg)
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 1
    with_acc = task.kind == "pair_repeat"
    write_metrics_csv(d / "metrics.csv", res.records, cfg.n_layers, with_acc)
    save_params(res.params, d / "params")
    n_params = n_params if n_params is not None else param_count(res.params)
    summary = {"task": task.kind, "params": n_params, "samples": res.samples, "final_train_loss": res.final_loss,
               "eval": evaluate(task, cfg, res.params, args.final_eval_samples, args.seed + 10_000)}
    print(f"final train loss {res.final_loss:.6g}")
    for k, v in summary["eval"].items():
        if k != "samples":
            print(f"eval {k} {v:.6g} on {summary['eval']['samples']} fresh samples")
    if with_acc and args.eval_lengths:
        acc = eval_length_generalization(task, cfg, res.params, args.eval_lengths, args.eval_samples,
                                         seed=args.seed + 20_000)
        summary["length_accuracy"] = {str(k): v for k, v in acc.items()}
        summary["falloff"] = falloff_report(acc, task.len_range[1], args.eval_samples)
        print(f"{'length':>6} {'accuracy':>9}")
        for L, a in acc.items():
            mark = "  (trained)" if task.len_range[0] <= L <= task.len_range[1] else ""
            print(f"{L:>6} {a:>9.4f}{mark}")
    write_json(d / "summary.json", summary)
    return 0


def cmd_bench(args) -> int:
    from .flash import BlockSpec, kernel_bench

    for n in args.n:
        _positive("n", n)
    _positive("d", args.d)
    _positive("threads", args.threads)
    if args.reps < 3:
        raise UsageError("--reps must be >= 3")
    try:
        blocks = BlockSpec(*args.blocks)
    except ValueError as e:
        raise UsageError(str(e)) from None
    rows = []
    for n in args.n:
        rows += kernel_bench(n, args.d, blocks, reps=args.reps, naive_max_n=args.naive_max_n, seed=args.seed,
                             threads=args.threads)
    cols = ["path", "n", "d", "b_r", "b_c", "median_ns", "aux_floats", "status", "reps"]
    d = out_dir(args)
    write_csv(d / "bench.csv", cols, [[r.get(c, args.reps if c == "reps" else "") for c in cols] for r in rows])
    print(",".join(cols[:-1]))
    for r in rows:
        print(",".join(str(r[c]) for c in cols[:-1]))
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"sigattn: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
