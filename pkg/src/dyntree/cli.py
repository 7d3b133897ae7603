"""Command-line entry point: ``dyntree <command> [options]``.

Commands
--------
fit       stream a CSV through the filter and write a cloud checkpoint
predict   load a checkpoint and emit predictive summaries for a query CSV or grid
bf        filtered log Bayes factors of two leaf models over random reorderings
optimize  sequential minimisation of a test function
al        active learning on a test function
classify  fit multinomial leaves to a CSV and report held-out error
bench     run a named desk-scale experiment end to end
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import bench, testfuncs
from .data import DataError, load_csv, read_table
from .design import DesignAborted, DesignConfig, active_learn_loop, optimize_loop, substream
from .leaves import make_model
from .particles import Cloud, FilterFailure
from .tree import TreePrior

EXIT_USAGE = 2
EXIT_FILTER = 3
EXIT_DATA = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _common(p, leaf=True):
    p.add_argument("--particles", type=int, default=1000, help="number of particles (default 1000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.95, help="tree prior split scale")
    p.add_argument("--beta", type=float, default=2.0, help="tree prior depth decay")
    p.add_argument("--min-leaf", type=int, default=None, help="override the leaf model's minimum leaf size")
    if leaf:
        p.add_argument("--leaf", choices=["constant", "linear", "multinomial"], default="constant")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")


def _open_out(path):
    if path == "-":
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def _write_rows(path, header, rows):
    fh, close = _open_out(path)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    finally:
        if close:
            fh.close()


def _write_json(path, payload):
    fh, close = _open_out(path)
    try:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    finally:
        if close:
            fh.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _prior(args) -> TreePrior:
    try:
        return TreePrior(args.alpha, args.beta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _summary(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _parse_grid(spec: str, d: int) -> np.ndarray:
    """``lo:hi:n`` per dimension, comma separated; one spec is reused for every dimension."""
    parts = spec.split(",")
    if len(parts) == 1:
        parts = parts * d
    if len(parts) != d:
        raise UsageError(f"--grid needs {d} comma-separated lo:hi:n specs")
    axes = []
    for p in parts:
        try:
            lo, hi, n = p.split(":")
            axes.append(np.linspace(float(lo), float(hi), int(n)))
        except ValueError:
            raise UsageError(f"bad grid spec {p!r}; expected lo:hi:n") from None
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    store = load_csv(args.data, args.response, classification=args.leaf == "multinomial")
    model = make_model(args.leaf, store.d, store.n_classes, args.min_leaf)
    t0 = args.t0 if args.t0 is not None else max(model.min_rows, model.default_t0())
    if store.n < t0:
        raise UsageError(f"need at least t0={t0} rows, file has {store.n}")
    head = store.head(t0)
    cloud = Cloud(head, model, n_particles=args.particles, prior=_prior(args), seed=args.seed, t0=t0)
    X, y = store.X, store.y
    for t in range(t0, store.n):
        cloud.step(X[t], y[t])
    if args.out == "-":
        _write_json("-", cloud.to_dict())
    else:
        cloud.save(args.out)
    print(f"fit {store.n} rows, log marginal likelihood {cloud.log_ml:.6f}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    cloud = Cloud.load(args.checkpoint)
    if args.data:
        table = read_table(args.data)
        names = [n for n in table if n != args.response]
        try:
            Q = np.column_stack([np.asarray(table[n], dtype=float) for n in names])
        except ValueError as exc:
            raise DataError(f"{args.data}: non-numeric query value ({exc})") from None
    elif args.grid:
        Q = _parse_grid(args.grid, cloud.store.d)
        names = [f"x{j}" for j in range(cloud.store.d)]
    else:
        raise UsageError("predict needs --data or --grid")
    if Q.shape[1] != cloud.store.d:
        raise UsageError(f"query has {Q.shape[1]} columns, checkpoint expects {cloud.store.d}")
    pred = cloud.predict(Q)
    if cloud.model.real:
        lo, hi = pred.interval(0.9)
        header = names + ["mean", "var", "q05", "q95"]
        rows = [list(map(float, q)) + [float(m), float(v), float(a), float(b)]
                for q, m, v, a, b in zip(Q, pred.mean, pred.var, lo, hi)]
    else:
        C = pred.probs.shape[1]
        header = names + [f"p{c}" for c in range(C)] + ["class", "entropy"]
        rows = [list(map(float, q)) + list(map(float, p)) + [int(k), float(e)]
                for q, p, k, e in zip(Q, pred.probs, pred.cls, pred.entropy)]
    _write_rows(args.out, header, rows)
    return 0


def _dataset(args):
    if args.data:
        store = load_csv(args.data, args.response)
        return store.X, store.yf, None, None
    f = testfuncs.get(args.function)
    X = f.uniform(args.n, substream(args.seed, "data"))
    y = f.sample(X, substream(args.seed, "noise"))
    if f.d == 1:
        grid = np.linspace(*f.bounds[0], 200)[:, None]
        return X, y, grid, f(grid)
    return X, y, None, None


def cmd_bf(args) -> int:
    X, y, grid, truth = _dataset(args)
    rows = bench.bayes_factor_experiment(X, y, args.reps, args.leaf_a, args.leaf_b, args.t0, args.particles,
                                         args.seed, grid, truth)
    steps = len(rows[0]["trace"]) if rows else 0
    out = []
    for r in rows:
        for k, v in enumerate(r["trace"]):
            out.append([str(r["rep"]), args.t0 + k + 1, v])
    mean = np.mean([r["trace"] for r in rows], axis=0) if steps else []
    for k, v in enumerate(mean):
        out.append(["mean", args.t0 + k + 1, float(v)])
    _write_rows(args.out, ["rep", "t", "log_bf"], out)
    final = [r["log_bf"] for r in rows]
    print(f"final log BF: mean {np.mean(final):.4f}, positive in {sum(v > 0 for v in final)}/{len(final)} runs",
          file=sys.stderr)
    return 0


def _config(args, heuristic) -> DesignConfig:
    try:
        return DesignConfig(M=args.candidates, phi=args.phi, heuristic=heuristic, rounds=args.rounds,
                            n_particles=args.particles, seed=args.seed, model=args.leaf, n_init=args.init,
                            alpha=args.alpha, beta=args.beta, min_leaf=args.min_leaf)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_optimize(args) -> int:
    f = testfuncs.get(args.function)
    cfg = _config(args, "ei")
    trace, _ = optimize_loop(f.objective(substream(args.seed, "noise")), f.bounds, cfg)
    trace.report["value_at_best_x"] = float(f(np.array(trace.report["best_x"]))[0])
    _write_json(args.out, trace.to_dict())
    return 0


def cmd_al(args) -> int:
    if args.heuristic == "entropy" or args.function == "threeclass":
        return _al_classes(args)
    f = testfuncs.get(args.function)
    cfg = _config(args, args.heuristic)
    if f.d == 1:
        grid = np.linspace(*f.bounds[0], 200)[:, None]
    else:
        grid = substream(args.seed, "holdout").random((200, f.d))
        lo = np.array([b[0] for b in f.bounds])
        hi = np.array([b[1] for b in f.bounds])
        grid = lo + (hi - lo) * grid
    trace, _ = active_learn_loop(f.objective(substream(args.seed, "noise")), f.bounds, cfg, truth=(grid, f(grid)))
    _write_json(args.out, trace.to_dict())
    return 0


def _al_classes(args) -> int:
    """Entropy-driven sampling of the synthetic three-class problem on the unit square."""
    if args.heuristic != "entropy" or args.function != "threeclass":
        raise UsageError("the entropy heuristic pairs with --function threeclass")
    args.leaf = "multinomial"
    cfg = _config(args, "entropy")
    rng = substream(args.seed, "noise")

    def oracle(x):
        return int(bench.noisy_labels(np.atleast_2d(x), rng)[0])

    grid = substream(args.seed, "holdout").random((1000, 2))
    trace, _ = active_learn_loop(oracle, ((0.0, 1.0), (0.0, 1.0)), cfg,
                                 truth=(grid, bench.three_class_labels(grid)), n_classes=3)
    _write_json(args.out, trace.to_dict())
    return 0


def cmd_classify(args) -> int:
    store = load_csv(args.data, args.response, classification=True)
    model = make_model("multinomial", store.d, store.n_classes, args.min_leaf)
    cloud = Cloud(store.head(1), model, n_particles=args.particles, prior=_prior(args), seed=args.seed, t0=1)
    for t in range(1, store.n):
        cloud.step(store.X[t], store.y[t])
    if args.test:
        test = load_csv(args.test, args.response, classification=True)
        if test.d != store.d:
            raise UsageError("training and test files have different covariates")
        Q, truth = test.X, test.y
    else:
        Q, truth = store.X, store.y
    pred = cloud.predict(Q)
    C = pred.probs.shape[1]
    rows = [list(map(float, q)) + list(map(float, p)) + [int(k), float(e), int(t)]
            for q, p, k, e, t in zip(Q, pred.probs, pred.cls, pred.entropy, truth)]
    _write_rows(args.out, [f"x{j}" for j in range(store.d)] + [f"p{c}" for c in range(C)]
                + ["class", "entropy", "label"], rows)
    err = float(np.mean(pred.cls != truth))
    print(f"misclassification rate {err:.4f} on {len(truth)} rows", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    name = args.experiment
    reps = args.reps
    kw = {"seed": args.seed, "n_particles": args.particles}
    if name == "parabola":
        rows = bench.parabola(reps=reps or 30, **kw)
        header = ["rep", "log_bf", "rmse_linear", "rmse_constant"]
        table = [[r["rep"], r["log_bf"], r["rmse_a"], r["rmse_b"]] for r in rows]
        summary = {"log_bf": [r["log_bf"] for r in rows], "rmse_linear": [r["rmse_a"] for r in rows],
                   "rmse_constant": [r["rmse_b"] for r in rows]}
    elif name == "friedman":
        leaves = [args.leaf] if args.leaf else ["linear", "constant"]
        rows = bench.friedman(reps=reps or 20, leaves=leaves, min_leaf=args.min_leaf, **kw)
        header = ["rep"] + [f"rmse_{k}" for k in leaves]
        table = [[r["rep"]] + [r[k] for k in leaves] for r in rows]
        summary = {f"rmse_{k}": [r[k] for r in rows] for k in leaves}
    elif name == "sincauchy":
        hs = [args.heuristic] if args.heuristic else ["alc", "alm"]
        rows = bench.sincauchy_active(reps=reps or 30, heuristics=hs, leaf=args.leaf or "linear", **kw)
        header = ["rep"] + [f"rmse_{h}" for h in hs]
        table = [[r["rep"]] + [r[h] for h in hs] for r in rows]
        summary = {f"rmse_{h}": [r[h] for r in rows] for h in hs}
    elif name == "exp2d":
        rows = bench.exp2d_optimize(reps=reps or 50, leaf=args.leaf or "constant", phi=args.phi, **kw)
        header = ["rep", "best_mean", "value", "x1", "x2"]
        table = [[r[k] for k in header] for r in rows]
        summary = {"best_mean": [r["best_mean"] for r in rows], "value": [r["value"] for r in rows]}
    elif name == "classification":
        res = bench.classification(**kw)
        header = ["error", "error_clean", "entropy_x1", "entropy_x2", "boundary_distance"]
        table = [[res["error"], res["error_clean"], *res["entropy_argmax"], res["boundary_distance"]]]
        summary = {"error": [res["error"]]}
    else:  # argparse restricts the choices
        raise UsageError(f"unknown experiment {name!r}")
    _write_rows(args.out, header, table)
    for key, vals in summary.items():
        m, s = _summary(vals)
        print(f"{key}: mean {m:.4f} sd {s:.4f} over {len(vals)}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyntree", description="Dynamic trees fit by particle learning.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit", help="filter a CSV and write a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--response", default="y")
    s.add_argument("--t0", type=int, default=None)
    _common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="predict from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="query CSV (a response column, if present, is ignored)")
    s.add_argument("--response", default="y")
    s.add_argument("--grid", help="lo:hi:n per dimension, comma separated (write --grid=-1:1:50 for a negative lo)")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("bf", help="log Bayes factor traces over reorderings")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--function", default="parabola", choices=sorted(testfuncs.FUNCTIONS))
    s.add_argument("--response", default="y")
    s.add_argument("--n", type=int, default=100, help="sample size for a test function")
    s.add_argument("--leaf-a", default="linear", choices=["constant", "linear"])
    s.add_argument("--leaf-b", default="constant", choices=["constant", "linear"])
    s.add_argument("--reps", type=int, default=30)
    s.add_argument("--t0", type=int, default=5)
    _common(s, leaf=False)
    s.set_defaults(func=cmd_bf)

    for name, func, heuristics, default_h in (
        ("optimize", cmd_optimize, ["ei"], "ei"),
        ("al", cmd_al, ["alm", "alc", "entropy"], "alc"),
    ):
        s = sub.add_parser(name, help="sequential design on a test function")
        s.add_argument("--function", default="sincauchy" if name == "al" else "exp2d",
                       choices=sorted(testfuncs.FUNCTIONS) + (["threeclass"] if name == "al" else []))
        s.add_argument("--phi", type=float, default=1.0)
        s.add_argument("--candidates", type=int, default=100)
        s.add_argument("--rounds", type=int, default=10)
        s.add_argument("--init", type=int, default=10)
        s.add_argument("--heuristic", choices=heuristics, default=default_h)
        _common(s)
        s.set_defaults(func=func)

    s = sub.add_parser("classify", help="multinomial leaves on a labelled CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--test")
    s.add_argument("--response", default="y")
    _common(s, leaf=False)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("bench", help="run a named experiment")
    s.add_argument("experiment", choices=sorted(bench.EXPERIMENTS))
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--leaf", choices=["constant", "linear"], default=None)
    s.add_argument("--heuristic", choices=["alm", "alc"], default=None)
    s.add_argument("--phi", type=float, default=1.0)
    _common(s, leaf=False)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dyntree {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FilterFailure as exc:
        print(f"dyntree {args.command}: filter failure: {exc}", file=sys.stderr)
        return EXIT_FILTER
    except DesignAborted as exc:
        print(f"dyntree {args.command}: {exc} (after {len(exc.trace)} rounds)", file=sys.stderr)
        return EXIT_FILTER
    except (DataError, OSError) as exc:
        print(f"dyntree {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
