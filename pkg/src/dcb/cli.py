"""Command-line interface.

Subcommands: ``estimate`` (point estimate and interval on a panel CSV),
``simulate`` (Monte Carlo tables) and ``diagnose`` (balance diagnostics).

Exit codes: 0 success, 1 input or configuration error, 2 infeasible or
degenerate balancing problem. Every run writes ``manifest.json`` next to
its outputs.
"""

import argparse
import datetime as _dt
import json
import os
import platform
import sys
import warnings

import numpy as np
import scipy

from . import __version__
from .balancer import (
    BalanceConfig,
    TuningGrid,
    imbalance_report,
    solve_weight_sequence,
    tune_constraints,
    uniform_weights,
    write_rows,
)
from .errors import (
    DCBError,
    EmptyStratum,
    Infeasible,
    MissingCell,
    NonBinaryTreatment,
    ParseError,
    PeriodOutOfRange,
    SeparationDetected,
    TooFewRows,
    ZeroDenominator,
)
from .estimator import DCBConfig, contrast, dcb_estimate
from .panel import build_history, load_panel, match_mask, treatment_history
from .regression import LassoConfig, fit_coefficient_path
from .simulation import (
    METHODS,
    PROFILES,
    SimConfig,
    check_methods,
    load_config,
    run_replicates,
    summarize,
    write_tables,
)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2
INPUT_ERRORS = (ParseError, MissingCell, NonBinaryTreatment, PeriodOutOfRange, TooFewRows, ValueError, OSError)
DEGENERATE_ERRORS = (Infeasible, EmptyStratum, ZeroDenominator, SeparationDetected)
SCHEMA_VERSION = 1


class InputError(Exception):
    pass


def _seed(args):
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("DCB_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"DCB_SEED must be an integer, got {env!r}") from None
    return 0


def _history(text, flag):
    try:
        return treatment_history(text)
    except ValueError as exc:
        raise InputError(f"{flag}: {exc}") from None


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _manifest(out_dir, command, args, seed, started, outputs, config=None, status="ok", error=None):
    path = os.path.join(out_dir, "manifest.json")
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "seed": seed,
        "config": config,
        "versions": {
            "dcb": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "started": started,
        "finished": _now(),
        "status": status,
        "error": error,
        "outputs": [os.path.basename(p) for p in outputs],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _fail(code, exc):
    msg = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("period", "achieved_imbalance", "prefix", "row", "column"):
        v = getattr(exc, attr, None)
        if v is not None:
            msg[attr] = v
    print(json.dumps(msg, default=str), file=sys.stderr)
    return code


def _load(args):
    schema = None
    if args.schema:
        with open(args.schema, encoding="utf-8") as fh:
            schema = json.load(fh)
        if not isinstance(schema, dict):
            raise InputError("schema file must hold a JSON object")
    return load_panel(args.panel, schema)


def _dcb_config(args, seed, T):
    lasso = LassoConfig(seed=seed, lam=args.lam)
    grid = TuningGrid(
        G=args.grid_g,
        R=args.grid_r,
        lower=[args.grid_lower] * T if args.grid_lower is not None else None,
        upper=[args.grid_upper] * T if args.grid_upper is not None else None,
    )
    balance = BalanceConfig(delta=[args.delta] * T) if args.delta is not None else None
    quantile = {"chi": "chi_squared", "gauss": "gaussian"}[args.quantile]
    return DCBConfig(
        mode=args.mode, lasso=lasso, grid=grid, balance=balance, alpha=args.alpha, quantile=quantile
    )


def _write_infeasible(out_dir, exc):
    path = os.path.join(out_dir, "infeasible.csv")
    rows = getattr(exc, "table", None) or [
        {"period": getattr(exc, "period", None), "column": "", "gap": float("nan"), "bound": float("nan")}
    ]
    write_rows(rows, path, ["period", "column", "gap", "bound"])
    return path


def cmd_estimate(args):
    started = _now()
    seed = _seed(args)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    d = _history(args.d, "--d")
    d_alt = _history(args.d_alt, "--d-alt") if args.d_alt else None
    if d_alt is not None and (len(d_alt) != len(d) or d_alt == d):
        raise InputError("--d-alt must have the same length as --d and differ from it")
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    data = _load(args)
    if len(d) > data.T:
        raise InputError(f"history length {len(d)} exceeds the panel's {data.T} periods")
    cfg = _dcb_config(args, seed, len(d))
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            rep = dcb_estimate(data, d, cfg)
            reports = [rep]
            if d_alt is not None:
                rep_alt = dcb_estimate(data, d_alt, cfg)
                reports.append(rep_alt)
                rep = contrast(rep, rep_alt)
    except DEGENERATE_ERRORS as exc:
        outputs.append(_write_infeasible(args.out_dir, exc))
        _manifest(args.out_dir, "estimate", args, seed, started, outputs, status="infeasible", error=str(exc))
        return _fail(EXIT_INFEASIBLE, exc)
    report_path = os.path.join(args.out_dir, "report.json")
    doc = rep.to_dict()
    doc["warnings"] = sorted({str(w.message) for w in caught})
    doc["coef_paths"] = [r.coef_path.to_dict() for r in reports]
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    outputs.append(report_path)
    configs = []
    for i, r in enumerate(reports):
        suffix = "" if i == 0 else "_alt"
        path = os.path.join(args.out_dir, f"imbalance{suffix}.csv")
        imbalance_report(r.weights, data, path)
        outputs.append(path)
        configs.append(r.weights.config.to_dict())
    _manifest(args.out_dir, "estimate", args, seed, started, outputs, config={"balance": configs})
    print(json.dumps({"mu_hat": rep.mu_hat, "ci": list(rep.ci), "mode": rep.quantile_mode}))
    return EXIT_OK


def cmd_diagnose(args):
    started = _now()
    seed = _seed(args)
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []
    d = _history(args.d, "--d")
    data = _load(args)
    if len(d) > data.T:
        raise InputError(f"history length {len(d)} exceeds the panel's {data.T} periods")
    cfg = _dcb_config(args, seed, len(d))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for t in range(1, len(d) + 1):
                if not match_mask(data, d[:t]).any():
                    raise EmptyStratum(d[:t])
            if cfg.balance is None:
                path = fit_coefficient_path(data, d, cfg.mode, cfg.lasso)
                _, weights, _ = tune_constraints(data, d, path, grid=cfg.grid)
            else:
                weights = solve_weight_sequence(data, d, cfg.balance)
    except DEGENERATE_ERRORS as exc:
        outputs.append(_write_infeasible(args.out_dir, exc))
        _manifest(args.out_dir, "diagnose", args, seed, started, outputs, status="infeasible", error=str(exc))
        return _fail(EXIT_INFEASIBLE, exc)
    base = uniform_weights(data, d)
    rows = []
    for name, w in (("dcb", weights), ("uniform", base)):
        for r in imbalance_report(w, data):
            rows.append({"weights": name, **r})
    imb_path = os.path.join(args.out_dir, "imbalance.csv")
    write_rows(rows, imb_path, ["weights", "period", "column", "gap", "bound"])
    summary = []
    for name, w in (("dcb", weights), ("uniform", base)):
        for t in range(1, len(d) + 1):
            g = w.gamma[t - 1]
            summary.append(
                {
                    "weights": name,
                    "period": t,
                    "stratum_count": int(match_mask(data, d[:t]).sum()),
                    "max_weight": float(g.max()),
                    "effective_sample_size": float(1.0 / (g @ g)),
                }
            )
    sum_path = os.path.join(args.out_dir, "weights_summary.csv")
    write_rows(summary, sum_path, ["weights", "period", "stratum_count", "max_weight", "effective_sample_size"])
    outputs += [imb_path, sum_path]
    _manifest(args.out_dir, "diagnose", args, seed, started, outputs, config={"balance": weights.config.to_dict()})
    return EXIT_OK


def cmd_simulate(args):
    started = _now()
    seed = _seed(args)
    if args.profile not in PROFILES:
        raise InputError(f"unknown profile {args.profile!r}; expected one of {sorted(PROFILES)}")
    prof = dict(PROFILES[args.profile])
    sim_kw, run_kw = {}, {}
    if args.config:
        sim_kw, run_kw = load_config(args.config)
    replicates = int(args.replicates or run_kw.get("replicates", prof.pop("replicates")))
    prof.pop("replicates", None)
    methods = args.methods.split(",") if args.methods else run_kw.get("methods", list(METHODS))
    try:
        methods = check_methods([m.strip() for m in methods])
    except ValueError as exc:
        raise InputError(str(exc)) from None
    target = args.target or run_kw.get("target", "contrast")
    alpha = float(run_kw.get("alpha", args.alpha))
    workers = int(args.workers if args.workers is not None else run_kw.get("workers", 1))
    if replicates < 2:
        raise InputError("replicates must be >= 2")
    kw = {**prof, **sim_kw, "seed": seed}
    try:
        cfg = SimConfig(**kw)
    except TypeError as exc:
        raise InputError(f"bad configuration: {exc}") from None
    os.makedirs(args.out_dir, exist_ok=True)

    def progress(done, total):
        print(f"[simulate] replicate {done}/{total}", file=sys.stderr, flush=True)

    recs = run_replicates(cfg, methods, replicates, workers, alpha, progress=None if args.quiet else progress)
    result = summarize(recs, methods, target, cfg, alpha)
    outputs = write_tables(result, args.out_dir)
    snapshot = {"sim": cfg.to_dict(), "replicates": replicates, "methods": methods, "target": target, "alpha": alpha}
    _manifest(args.out_dir, "simulate", args, seed, started, outputs, config=snapshot)
    return EXIT_OK


def _add_balance_flags(p):
    p.add_argument("--panel", required=True, help="long-form panel CSV")
    p.add_argument("--schema", help="JSON column mapping (unit, period, treatment, outcome, covariates)")
    p.add_argument("--d", required=True, help="target treatment history, e.g. 1,1")
    p.add_argument("--mode", choices=["linear", "full_interactions"], default="linear")
    p.add_argument("--delta", type=float, help="fixed balance slack for every period (skips tuning)")
    p.add_argument("--grid-lower", type=float, help="lower tuning multiplier")
    p.add_argument("--grid-upper", type=float, help="upper tuning multiplier")
    p.add_argument("--grid-g", type=int, default=10, help="values per tuning grid")
    p.add_argument("--grid-r", type=int, default=3, help="number of tuning grids")
    p.add_argument("--lam", type=float, help="fixed Lasso penalty (default: cross-validation)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--quantile", choices=["chi", "gauss"], default="chi")
    p.add_argument("--seed", type=int, help="seed (default: $DCB_SEED or 0)")
    p.add_argument("--out-dir", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="dcb", description="Dynamic covariate balancing")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate a mean potential outcome or a contrast")
    _add_balance_flags(p)
    p.add_argument("--d-alt", help="second history; reports the contrast d - d_alt")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("diagnose", help="balance diagnostics without estimation")
    _add_balance_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="run the Monte Carlo experiment")
    p.add_argument("--config", help="flat key = value experiment file")
    p.add_argument("--profile", default="desk", help="desk (n=200, p=50, 100 reps) or full")
    p.add_argument("--methods", help=f"comma separated subset of {','.join(METHODS)}")
    p.add_argument("--replicates", type=int)
    p.add_argument("--target", choices=["contrast", "level"])
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int, help="seed (default: $DCB_SEED or 0)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--quiet", action="store_true", help="no progress on stderr")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except DEGENERATE_ERRORS as exc:
        return _fail(EXIT_INFEASIBLE, exc)
    except (InputError, DCBError, *INPUT_ERRORS) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
