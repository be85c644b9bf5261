"""Command-line entry point.

Exit codes: 0 success, 1 not identifiable, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .data import read_data_csv
from .errors import (
    AllZeroInput,
    BracketFailure,
    DimensionMismatch,
    EstimationError,
    NonPositiveInput,
    NotIdentifiable,
    NotPositiveDefinite,
    RankDeficientDesign,
    TailTreeError,
    TreeError,
    UnparseableTimestamp,
)
from .estimate import (
    ESTIMATORS,
    default_neighborhoods,
    default_pairs,
    empirical_extremal_coefficient,
    empirical_pickands,
    fit_over_k,
    pareto_rank_transform,
)
from .hr_model import (
    HRTreeModel,
    extremal_coefficient,
    model_from_tree_file,
    pickands,
    read_model_file,
    tree_file_to_dict,
)
from .inference import DEFAULT_B, basic_bootstrap_ci, ece_asymptotic_ci, pickands_bootstrap_band
from .inference import sigma_l_bootstrap, sigma_l_model
from .pipeline import DEFAULT_WINDOW_R, format_event_csv, run_pipeline
from .simulate import DEFAULT_ROOT, add_noise, format_samples_csv, sample_markov_tree
from .study import StudyConfig, format_study_csv, run_study
from .tree_core import TreeFile, check_identifiability_degree, extraction_plan

EXIT_OK, EXIT_NOT_IDENTIFIABLE, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(float(obj)) else float(obj)
    return obj


def _fmt(x) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _load(path: str, latent: list[int] | None) -> TreeFile:
    tf = read_model_file(path)
    if latent is not None:
        for v in latent:
            tf.tree.check_node(v)
        tf = dataclasses.replace(tf, latent=tuple(sorted(set(latent))))
    return tf


def _with_theta(tf: TreeFile, theta: list[float] | None) -> TreeFile:
    if theta is not None:
        if len(theta) != tf.tree.n_edges:
            raise UsageError(f"expected {tf.tree.n_edges} theta values, got {len(theta)}")
        tf = dataclasses.replace(tf, theta=tuple(theta))
    if tf.theta is None:
        raise UsageError("no edge parameters: add a 'theta:' line or pass --theta")
    return tf


def parse_k_range(text: str) -> list[int]:
    """``a:b`` or ``a:b:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError
            step = parts[2] if len(parts) == 3 else 1
            if step < 1:
                raise ValueError
            ks = list(range(parts[0], parts[1] + 1, step))
        else:
            ks = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad k range {text!r}") from None
    if not ks:
        raise UsageError("k range is empty")
    return ks


def _data_for(tf: TreeFile, data_path: str, nodes):
    dm = read_data_csv(data_path)
    labels = [tf.label(v) for v in nodes]
    try:
        x, dropped = dm.columns(labels)
    except KeyError as exc:
        raise UsageError(f"data does not match tree: {exc.args[0]}") from None
    return x, dropped


def _check_k(ks, n):
    bad = [k for k in ks if not 1 <= k <= n]
    if bad:
        raise UsageError(f"k values outside [1, {n}]: {bad}")


def _edge_name(tf: TreeFile, e: int) -> str:
    a, b = tf.tree.edges[e]
    return f"{a}-{b}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_check_id(args) -> int:
    tf = _load(args.tree, args.latent)
    check = check_identifiability_degree(tf.tree, tf.observed)
    lines = [f"identifiable: {'yes' if check.identifiable else 'no'}"]
    if check.identifiable:
        plan = extraction_plan(tf.tree, tf.observed)
        lines += ["extraction plan:"] + ["  " + s for s in plan.describe(tf.tree)]
    else:
        lines.append("violating latent nodes: " + ", ".join(f"{v} (degree {g})" for v, g in check.violators))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if check.identifiable else EXIT_NOT_IDENTIFIABLE


def cmd_simulate(args) -> int:
    tf = _with_theta(_load(args.model, args.latent), args.theta)
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    model = model_from_tree_file(tf)
    x = sample_markov_tree(model, args.n, seed=args.seed, root=args.root)
    if args.noise_sigma > 0:
        x = add_noise(x, args.noise_sigma, seed=args.seed)
    nodes = list(tf.tree.nodes)
    if args.drop_latent:
        nodes = sorted(tf.observed)
        x = x[:, [v - 1 for v in nodes]]
    _emit(format_samples_csv(x, [tf.label(v) for v in nodes]), args.out)
    return EXIT_OK


def cmd_fit(args) -> int:
    tf = _load(args.tree, args.latent)
    if args.asymptotic and args.estimator != "ece":
        raise UsageError("--asymptotic is only available with --estimator ece")
    nodes = sorted(tf.observed)
    ks = parse_k_range(args.k_range)
    x, dropped = _data_for(tf, args.data, nodes)
    _check_k(ks, x.shape[0])
    xh = pareto_rank_transform(x, nodes)
    plan = None if args.estimator == "ece" else default_neighborhoods(tf.tree, nodes, args.plan_radius)
    results, mean = fit_over_k(args.estimator, xh, tf.tree, nodes, ks, plan)
    fitted = dataclasses.replace(tf, theta=tuple(float(t) for t in mean))
    intervals = []
    if args.bootstrap:
        for k in ks:
            ci = basic_bootstrap_ci(args.estimator, xh, tf.tree, nodes, k, B=args.bootstrap,
                                    level=args.level, seed=args.seed, plan=plan)
            intervals.append(ci)
    if args.asymptotic:
        pairs = default_pairs(nodes)
        for k, res in zip(ks, results):
            model = HRTreeModel(tf.tree, res.theta_hat)
            if args.sigma == "model":
                sl = sigma_l_model(model, pairs)
            else:
                sl = sigma_l_bootstrap(xh, nodes, pairs, k, args.sigma_b, args.seed)
            ci = ece_asymptotic_ci(model, pairs, k, args.level, sl)
            ci.B = args.sigma_b if args.sigma == "bootstrap" else None
            ci.seed = args.seed
            intervals.append(ci)
    doc = {
        "model": tree_file_to_dict(fitted),
        "estimator": args.estimator,
        "k_range": ks,
        "rows_used": int(x.shape[0]),
        "rows_dropped": dropped,
        "plan_radius": plan.radius if plan is not None else None,
        "per_k": [r.to_dict() for r in results],
        "intervals": [rec for ci in intervals for rec in ci.records(tf.tree.edges)],
    }
    _emit(json.dumps(_json_safe(doc), indent=2) + "\n", args.out)
    if args.csv:
        bounds = {}
        for ci in intervals:
            for e in range(tf.tree.n_edges):
                bounds[(ci.k, e, ci.method)] = (ci.lower[e], ci.upper[e])
        lines = ["estimator,edge,k,theta_hat,method,lower,upper"]
        for r in results:
            for e in range(tf.tree.n_edges):
                base = [args.estimator, _edge_name(tf, e), str(r.k), repr(float(r.theta_hat[e]))]
                hits = [(m, b) for (k, ee, m), b in bounds.items() if k == r.k and ee == e]
                if not hits:
                    lines.append(",".join(base + ["", "", ""]))
                for m, (lo, hi) in hits:
                    lines.append(",".join(base + [m, repr(float(lo)), repr(float(hi))]))
        for e in range(tf.tree.n_edges):
            lines.append(",".join([args.estimator, _edge_name(tf, e), "mean", repr(float(mean[e])), "", "", ""]))
        Path(args.csv).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _parse_sets(text: str, tf: TreeFile) -> list[tuple[int, ...]]:
    sets = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        try:
            J = tuple(sorted({int(v) for v in chunk.replace(",", " ").split()}))
        except ValueError:
            raise UsageError(f"bad node set {chunk!r}") from None
        for v in J:
            tf.tree.check_node(v)
        if len(J) < 2:
            raise UsageError("node sets need at least two nodes")
        sets.append(J)
    return sets


def cmd_coeffs(args) -> int:
    tf = _load(args.model, args.latent)
    model = model_from_tree_file(_with_theta(tf, args.theta))
    if args.sets:
        sets = _parse_sets(args.sets, tf)
    else:
        nodes = sorted(tf.observed) if args.observed_only else list(tf.tree.nodes)
        sets = list(itertools.combinations(nodes, args.order))
    data = None
    if args.data:
        if args.k is None:
            raise UsageError("--k is required with --data")
        obs = sorted(tf.observed)
        x, _ = _data_for(tf, args.data, obs)
        _check_k([args.k], x.shape[0])
        data = pareto_rank_transform(x, obs)
    header = ["nodes", "labels", "model"]
    if data is not None:
        header.append("empirical")
    header.append("chi_model")
    if data is not None:
        header.append("chi_empirical")
    lines = [",".join(header)]
    for J in sets:
        lm = extremal_coefficient(model, J)
        row = ["-".join(map(str, J)), "-".join(tf.label(v) for v in J), repr(float(lm))]
        emp = None
        if data is not None:
            if set(J) <= tf.observed:
                emp = empirical_extremal_coefficient(data, J, args.k)
            row.append(_fmt(emp))
        row.append(_fmt(2 - lm) if len(J) == 2 else "NA")
        if data is not None:
            row.append(_fmt(2 - emp) if len(J) == 2 and emp is not None else "NA")
        lines.append(",".join(row))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_pickands(args) -> int:
    tf = _load(args.model, args.latent)
    model = model_from_tree_file(_with_theta(tf, args.theta))
    u, v = args.pair
    tf.tree.check_node(u)
    tf.tree.check_node(v)
    if u == v:
        raise UsageError("pair must have two distinct nodes")
    if args.grid < 2:
        raise UsageError("--grid needs at least 2 points")
    w = np.linspace(0.0, 1.0, args.grid)
    a_model = np.atleast_1d(pickands(model, u, v, w))
    a_emp = band = None
    if args.B and not args.data:
        raise UsageError("--B needs --data")
    if args.data:
        if args.k is None:
            raise UsageError("--k is required with --data")
        if {u, v} <= tf.observed:
            obs = sorted(tf.observed)
            x, _ = _data_for(tf, args.data, obs)
            _check_k([args.k], x.shape[0])
            xh = pareto_rank_transform(x, obs)
            a_emp = np.atleast_1d(empirical_pickands(xh, u, v, w, args.k))
            if args.B:
                band = pickands_bootstrap_band(xh, u, v, args.k, w, B=args.B, level=args.level, seed=args.seed)
        elif args.B:
            raise UsageError("bands need both nodes of the pair observed")
    header = ["w", "A_model"] + (["A_empirical"] if args.data else []) + (["band_lo", "band_hi"] if band else [])
    lines = [",".join(header)]
    for i, wi in enumerate(w):
        row = [repr(float(wi)), repr(float(a_model[i]))]
        if args.data:
            row.append(_fmt(a_emp[i]) if a_emp is not None else "NA")
        if band:
            row += [repr(float(band.lower[i])), repr(float(band.upper[i]))]
        lines.append(",".join(row))
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if args.window_r < 0:
        raise UsageError("--window-r must be nonnegative")
    events = run_pipeline(args.input, args.window_r, detrend=not args.no_detrend)
    _emit(format_event_csv(events), args.out)
    print(f"events: {len(events.dates)}", file=sys.stderr)
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = StudyConfig(reps=args.reps, n=args.n, seed=args.seed, noise_sigma=args.noise_sigma, root=args.root)
    if args.k_grid:
        cfg.k_grid = tuple(parse_k_range(args.k_grid))
    if args.estimators:
        names = tuple(s.strip() for s in args.estimators.split(",") if s.strip())
        unknown = [s for s in names if s not in ESTIMATORS]
        if unknown or not names:
            raise UsageError(f"unknown estimators: {unknown}")
        cfg.estimators = names
    if args.model:
        tf = _with_theta(_load(args.model, args.latent), args.theta)
        cfg.node_count, cfg.edges = tf.tree.node_count, tf.tree.edges
        cfg.theta, cfg.latent = tf.theta, tf.latent
    try:
        result = run_study(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(format_study_csv(result), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _node_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad node list {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tailtree", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model_arg="model"):
        sp.add_argument(model_arg, help="tree file (text or JSON); theta comes from its 'theta:' line")
        sp.add_argument("--latent", type=_node_list, help="latent nodes, overriding the file's '# latent:' line")
        sp.add_argument("--out", help="output path (default stdout)")

    sp = sub.add_parser("check-id", help="identifiability check and extraction plan")
    common(sp, "tree")
    sp.set_defaults(func=cmd_check_id)

    sp = sub.add_parser("simulate", help="sample from the tree model")
    common(sp)
    sp.add_argument("--theta", type=_float_list)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--root", type=int, default=DEFAULT_ROOT)
    sp.add_argument("--noise-sigma", type=float, default=0.0)
    sp.add_argument("--drop-latent", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="estimate edge parameters over a k range")
    sp.add_argument("data")
    common(sp, "tree")
    sp.add_argument("--estimator", choices=ESTIMATORS, default="mme")
    sp.add_argument("--k-range", required=True, help="a:b[:step] or comma list")
    sp.add_argument("--plan-radius", type=int, default=2)
    sp.add_argument("--bootstrap", type=int, default=0, metavar="B")
    sp.add_argument("--asymptotic", action="store_true")
    sp.add_argument("--sigma", choices=("bootstrap", "model"), default="bootstrap",
                    help="covariance of the empirical coefficients for --asymptotic")
    sp.add_argument("--sigma-b", type=int, default=DEFAULT_B)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", help="tidy per-k table")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("coeffs", help="model-based and empirical extremal coefficients")
    common(sp)
    sp.add_argument("--theta", type=_float_list)
    sp.add_argument("--data")
    sp.add_argument("--k", type=int)
    sp.add_argument("--order", type=int, default=2)
    sp.add_argument("--sets", help="explicit node sets, e.g. '1 2;2 3 4'")
    sp.add_argument("--observed-only", action="store_true")
    sp.set_defaults(func=cmd_coeffs)

    sp = sub.add_parser("pickands", help="Pickands dependence function on a grid")
    common(sp)
    sp.add_argument("--theta", type=_float_list)
    sp.add_argument("--pair", type=int, nargs=2, required=True)
    sp.add_argument("--data")
    sp.add_argument("--k", type=int)
    sp.add_argument("--grid", type=int, default=21)
    sp.add_argument("--B", type=int, default=0)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_pickands)

    sp = sub.add_parser("pipeline", help="raw gauge CSV to deseasonalized event table")
    sp.add_argument("input")
    sp.add_argument("--out")
    sp.add_argument("--window-r", type=int, default=DEFAULT_WINDOW_R)
    sp.add_argument("--no-detrend", action="store_true")
    sp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the pipeline is deterministic")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("study", help="Monte Carlo study of the estimators")
    sp.add_argument("--model", help="model file; defaults to the built-in seven-node study tree")
    sp.add_argument("--latent", type=_node_list)
    sp.add_argument("--theta", type=_float_list)
    sp.add_argument("--reps", type=int, default=200)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--k-grid", help="a:b[:step] or comma list")
    sp.add_argument("--estimators", help="comma list, default mme,cle,ece")
    sp.add_argument("--noise-sigma", type=float, default=1.0)
    sp.add_argument("--root", type=int, default=DEFAULT_ROOT)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_study)
    return p


_NUMERIC = (EstimationError, NotPositiveDefinite, BracketFailure, np.linalg.LinAlgError)
_USAGE = (UsageError, TreeError, UnparseableTimestamp, RankDeficientDesign, DimensionMismatch,
          AllZeroInput, NonPositiveInput, OSError, KeyError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except NotIdentifiable as exc:
        print(f"not identifiable: {exc}", file=sys.stderr)
        return EXIT_NOT_IDENTIFIABLE
    except _NUMERIC as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _USAGE as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TailTreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
