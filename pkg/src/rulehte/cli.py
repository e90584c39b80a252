"""Command-line interface: ``rulehte <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
error, 1 any other library error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import simbench as sb
from ._accel import backend
from .data import Schema, load_dataset, read_columns, write_dataset
from .errors import ConfigError, DataError, RuleHTEError
from .model import (load_model, pairwise_hte, predict_hte, predict_outcome, save_model, write_importance,
                    write_variable_importance)
from .pipeline import TUNING_GRID, RunConfig, fit_model
from .tuning import grid_configs, tune

logger = logging.getLogger("rulehte")

# RunConfig fields exposed as flags: (flag, type)
_CONFIG_FLAGS = {
    "learner": str, "ensemble": str, "n_trees": int, "mean_size": float, "shrinkage": float, "q": float,
    "clip_eps": float, "cv_folds": int, "n_lambda": int, "lambda_ratio": float, "min_node_size": int,
    "subsample": float, "alpha": float, "tol": float, "max_iter": int, "group_size": str, "seed": int,
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="JSON file of configuration keys")
    for name, typ in _CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--no-standardize", dest="standardize", action="store_false", default=None,
                   help="penalise raw basis coefficients instead of unit-SD columns")


def _run_config(args) -> RunConfig:
    values = {}
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object")
    for name in (*_CONFIG_FLAGS, "standardize"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return RunConfig.from_dict(values)


def _add_schema_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--outcome", default="y", help="outcome column (default y)")
    p.add_argument("--arm", default="w", help="arm column (default w)")
    p.add_argument("--covariates", default=None, help="comma-separated covariate columns (default: all others)")
    p.add_argument("--arms", dest="T", type=int, default=None, help="number of non-control arms T")


def _schema(args) -> Schema:
    covs = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    return Schema(args.outcome, args.arm, covs)


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_matrix(path, header, columns) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = sb.ScenarioSpec.from_code(args.scenario, T=args.T, assignment=args.assignment,
                                     n_train=args.n_train, n_test=args.n_test, seed=args.seed)
    sim = sb.generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(sim.train, out / "train.csv")
    write_dataset(sim.test, out / "test.csv")
    T = spec.T
    for name, hte, gps in (("train", sim.train_hte, sim.train_gps), ("test", sim.true_hte, sim.true_gps)):
        header = [f"tau{t}" for t in range(1, T + 1)] + [f"e{t}" for t in range(T + 1)]
        _write_matrix(out / f"truth_{name}.csv", header, [*hte.T, *gps.T])
    _write_json({"scenario": dataclasses.asdict(spec), "code": spec.code}, out / "manifest.json")
    print(f"wrote {out}/train.csv, test.csv, truth_train.csv, truth_test.csv")
    return 0


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    data = load_dataset(args.train, _schema(args), args.T)
    gps = None
    if args.gps_file:
        gps = read_columns(args.gps_file, [f"e{t}" for t in range(data.T + 1)])
        if gps.shape[0] != data.n:
            raise DataError(f"{args.gps_file}: {gps.shape[0]} rows for {data.n} subjects")
    model, report = fit_model(data, cfg, gps)
    out = Path(args.out)
    save_model(model, out)
    stem = out.with_suffix("")
    summary = report.summary()
    summary["lambda"] = _jsonable(summary["lambda"])
    _write_json(summary, f"{stem}.report.json")
    rows = []
    for k, cv in enumerate(report.cv):
        for r in cv.rows():
            rows.append({"stage": k + 1, **r})
    sb.write_rows(rows, f"{stem}.cv.csv", ["stage", "index", "lambda", "cv_mse", "cv_se", "selected"])
    print(f"{cfg.method_name}: {report.n_rules_generated} rules generated, {report.n_rules} after dedup, "
          f"{report.n_active_terms} active terms, lambda={report.lam:.6g}")
    for f in report.flags:
        print(f"warning: {f}", file=sys.stderr)
    return 0


def _load_covariates(path, model):
    return read_columns(path, list(model.names))


def cmd_predict(args) -> int:
    model = load_model(args.model)
    X = _load_covariates(args.data, model)
    if args.pairwise:
        t1, t2 = args.pairwise
        if t1 == t2:
            raise ConfigError("--pairwise needs two different arms")
        header, cols = [f"hte_{t1}_vs_{t2}"], [pairwise_hte(model, X, t1, t2)]
    elif args.hte is not None:
        header, cols = [f"hte{args.hte}"], [predict_hte(model, X, args.hte)]
    elif args.outcome is not None:
        header, cols = [f"mu{args.outcome}"], [predict_outcome(model, X, args.outcome)]
    else:
        H = model.hte_matrix(X)
        best = sb.best_arm(H)
        header = [f"hte{t}" for t in range(1, model.T + 1)] + ["best_arm"]
        cols = [*H.T, best]
    _write_matrix(args.out, header, cols)
    return 0


def cmd_importance(args) -> int:
    model = load_model(args.model)
    if args.t1 == args.t2:
        raise ConfigError("--t1 and --t2 must differ")
    write_importance(model, args.out, args.t1, args.t2, args.all)
    if args.variables_out:
        write_variable_importance(model, args.variables_out, args.t1, args.t2)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    data = load_dataset(args.data, _schema(args), args.T if args.T is not None else model.T)
    X = data.X
    if list(data.names) != list(model.names):
        X = read_columns(args.data, list(model.names))
    est = model.hte_matrix(X)
    result = {}
    if args.truth:
        true = read_columns(args.truth, [f"tau{t}" for t in range(1, model.T + 1)])
        rep = sb.evaluate_all(true, est, None)
        result = {k: _jsonable(v) for k, v in dataclasses.asdict(rep).items() if k != "n_terms"}
    result["n_terms"] = int(np.count_nonzero(np.any(model.coef != 0, axis=1)))
    if args.subgroups_out:
        rows = []
        for t in range(1, model.T + 1):
            bins = sb.subgroup_eval(est[:, t - 1], data, t, args.n_groups)
            try:
                score = sb.tune_metric([b["actual"] for b in bins], [b["estimated"] for b in bins])
            except DataError:
                score = math.inf
            result[f"tune_metric_arm{t}"] = _jsonable(score)
            rows.extend({"arm": t, **b} for b in bins)
        sb.write_rows(rows, args.subgroups_out, ["arm", "group", "n", "n_arm", "n_control", "estimated", "actual"])
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_tune(args) -> int:
    base = _run_config(args)
    data = load_dataset(args.train, _schema(args), args.T)
    grid = TUNING_GRID
    if args.grid:
        try:
            grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read grid {args.grid}: {exc}") from exc
    configs = []
    methods = [m.strip() for m in args.methods.split(",")] if args.methods else [base.method_name]
    for cfg in grid_configs(base, grid):
        for m in methods:
            learner, kind = RunConfig.from_method(m).learner, RunConfig.from_method(m).ensemble
            configs.append(dataclasses.replace(cfg, learner=learner, ensemble=kind))
    arms = [int(a) for a in args.arm_list.split(",")] if args.arm_list else None
    res = tune(data, configs, args.holdout, arms, args.n_groups, base.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["n_trees", "mean_size", "shrinkage", "method", "metric"]
    cols += sorted({k for r in res.rows for k in r if k.startswith("metric_arm")})
    sb.write_rows(res.rows, out / "grid.csv", cols)
    if res.best is None:
        print("every grid point has an infinite tuning metric; no best config written", file=sys.stderr)
        return 0
    _write_json(res.best.to_dict(), out / "best-config.json")
    print(f"best: n_trees={res.best.n_trees} mean_size={res.best.mean_size} "
          f"shrinkage={res.best.shrinkage} method={res.best.method_name}")
    return 0


def cmd_benchmark(args) -> int:
    if args.manifest:
        m = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        scenarios = [sb.ScenarioSpec(**s) for s in m["scenarios"]]
        methods = [RunConfig.from_dict(c) for c in m["methods"]]
        reps, seed, gps = m["replications"], m["master_seed"], m["gps"]
    else:
        base = _run_config(args)
        scenarios = [sb.ScenarioSpec.from_code(code, T=T, assignment=a, n_train=args.n_train, n_test=args.n_test)
                     for a in args.assignment.split(",") for T in (int(x) for x in args.arm_counts.split(","))
                     for code in args.scenarios.split(",")]
        methods = []
        for name in args.methods.split(","):
            proto = RunConfig.from_method(name.strip())
            methods.append(dataclasses.replace(base, learner=proto.learner, ensemble=proto.ensemble))
        reps, seed, gps = args.replications, base.seed, args.gps
    res = sb.run_benchmark(scenarios, methods, reps, seed, args.jobs, gps)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sb.write_benchmark(res, out / "report.csv", out / "manifest.json", out / "replicates.csv")
    for r in res.rows:
        if r["metric"] in ("mpehe", "kappa"):
            print(f"{r['scenario']:<24} {r['method']:<10} {r['metric']:<7} {r['mean']:.4f} ({r['sd']:.4f})")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rulehte", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a simulation scenario")
    s.add_argument("--scenario", default="L-L", help="main-treatment code, e.g. L-L or N-S")
    s.add_argument("--assignment", choices=sb.ASSIGNMENTS, default=sb.RCT)
    s.add_argument("--arms", dest="T", type=int, default=2)
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-test", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a model to a training CSV")
    f.add_argument("train")
    f.add_argument("--out", required=True, help="model JSON path; report and CV curve are written beside it")
    f.add_argument("--gps-file", help="CSV of known propensities e0..eT, one row per subject")
    _add_schema_flags(f)
    _add_config_flags(f)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="predict effects or outcomes")
    pr.add_argument("model")
    pr.add_argument("data")
    grp = pr.add_mutually_exclusive_group()
    grp.add_argument("--hte", type=int, metavar="T")
    grp.add_argument("--pairwise", type=int, nargs=2, metavar=("T1", "T2"))
    grp.add_argument("--outcome", type=int, metavar="T")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    im = sub.add_parser("importance", help="term and variable importance report")
    im.add_argument("model")
    im.add_argument("--t1", type=int, default=1)
    im.add_argument("--t2", type=int, default=0)
    im.add_argument("--all", action="store_true", help="include inactive terms")
    im.add_argument("--out", required=True)
    im.add_argument("--variables-out")
    im.set_defaults(func=cmd_importance)

    ev = sub.add_parser("evaluate", help="metrics against true effects and subgroup tables")
    ev.add_argument("model")
    ev.add_argument("data")
    ev.add_argument("--truth", help="CSV with tau1..tauT columns")
    ev.add_argument("--subgroups-out")
    ev.add_argument("--n-groups", type=int, default=5)
    ev.add_argument("--out")
    _add_schema_flags(ev)
    ev.set_defaults(func=cmd_evaluate)

    tu = sub.add_parser("tune", help="grid search scored on a holdout split")
    tu.add_argument("train")
    tu.add_argument("--grid", help="JSON object of config key -> list of values")
    tu.add_argument("--methods", help="comma-separated methods, e.g. gbm.gl,gbm.agl")
    tu.add_argument("--holdout", type=float, default=0.3)
    tu.add_argument("--arm-list", help="comma-separated arms to score (default all)")
    tu.add_argument("--n-groups", type=int, default=5)
    tu.add_argument("--out-dir", required=True)
    _add_schema_flags(tu)
    _add_config_flags(tu)
    tu.set_defaults(func=cmd_tune)

    b = sub.add_parser("benchmark", help="replicated simulation benchmark")
    b.add_argument("--manifest", help="replay a previous run's manifest.json")
    b.add_argument("--scenarios", default="L-L")
    b.add_argument("--assignment", default=sb.RCT, help="rct, observational or both comma-separated")
    b.add_argument("--arm-counts", default="2", help="comma-separated T values")
    b.add_argument("--methods", default="gbm.gl,gbm.agl")
    b.add_argument("--replications", type=int, default=10)
    b.add_argument("--n-train", type=int, default=1000)
    b.add_argument("--n-test", type=int, default=1000)
    b.add_argument("--gps", choices=("fit", "true"), default="fit")
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--out-dir", required=True)
    _add_config_flags(b)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logger.info("kernel backend: %s", backend())
    try:
        return args.func(args)
    except RuleHTEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
