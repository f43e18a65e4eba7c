"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 an embedded check failed.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, Setting, load_experiment, to_dict
from .controllers import make_controller
from .harness import (
    ALPHA_ETAS,
    ALPHA_SETTING,
    CheckResult,
    EvalSummary,
    MissingTableError,
    alpha_ablation,
    distribution_ablation,
    embedded_checks,
    evaluate_all,
    resolve_table,
    setting_seed,
    tradeoff_sweep,
    trend_check,
)
from .risk import TableError, build_risk_table, export_csv, load_table, save_table
from .world import run_trial

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2

SUMMARY_FIELDS = ("method", "x_init", "v_init", "one_minus_eps", "eta", "p_safe", "wilson_lo", "wilson_hi", "mean_t",
                  "n_trials", "n_censored")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment TOML file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="root seed (overrides seed in the config)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes (default: all CPUs)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. scenario.dt=0.02 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="occsafe", description="Occlusion-aware probabilistic safe control at a crossing.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-table", help="estimate the risk table on the configured grid")
    _common(p)

    p = sub.add_parser("simulate", help="one rollout with per-step traces")
    _common(p)
    p.add_argument("--method", default="proposed")
    p.add_argument("--x-init", type=float, default=-120.0)
    p.add_argument("--v-init", type=float, default=0.0)
    p.add_argument("--one-minus-eps", type=float, default=0.9)
    p.add_argument("--trial", type=int, default=0, help="trial index within the setting's schedules")

    p = sub.add_parser("evaluate", help="evaluate methods over the configured settings")
    _common(p)
    p.add_argument("--check-trend", action="store_true", help="also check rank trends of the risk table")

    p = sub.add_parser("sweep", help="safety/efficiency trade-off over settings")
    _common(p)

    p = sub.add_parser("ablate", help="eta or arrival-distribution ablation")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--alpha", action="store_true")
    g.add_argument("--distribution", action="store_true")
    p.add_argument("--eta", type=float, action="append", help="eta values (default: 0.05 0.1 0.2 0.5 1.0)")
    p.add_argument("--table", dest="tables", action="append", default=[], metavar="NAME=PATH",
                   help="risk table built under distribution NAME (repeatable)")
    p.add_argument("--n-trials", type=int, default=100)
    return parser


# ---------------------------------------------------------------------------
# output helpers


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _write_summaries(path: Path, rows: list[EvalSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for s in rows:
            d = s.to_dict()
            w.writerow(["" if d[f] is None else d[f] for f in SUMMARY_FIELDS])


def _versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {"occsafe": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "numba": numba.__version__, "scipy": scipy.__version__}


def _manifest(out: Path, args, cfg: ExperimentConfig, files: list[str]) -> None:
    _write_json(out / "manifest.json", {
        "command": args.command,
        "argv": list(args.argv),
        "seed": cfg.seed,
        "config": to_dict(cfg),
        "versions": _versions(),
        "outputs": sorted(files),
    })


def _report(checks: list[CheckResult]) -> int:
    for c in checks:
        print(c.line())
    return EXIT_CHECK if any(not c.passed for c in checks) else EXIT_OK


def _load(args) -> ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    return load_experiment(args.config, overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_build_table(args, cfg: ExperimentConfig, out: Path) -> int:
    table = build_risk_table(cfg.scenario, cfg.risk.grid, cfg.risk.n_trials, cfg.risk.horizon, cfg.seed, cfg.risk,
                             workers=args.workers)
    save_table(table, out / "table.json")
    export_csv(table, out / "table.csv")
    print(json.dumps(table.meta, sort_keys=True))
    _manifest(out, args, cfg, ["table.json", "table.csv"])
    return EXIT_OK


def cmd_simulate(args, cfg: ExperimentConfig, out: Path) -> int:
    setting = Setting(args.x_init, args.v_init, args.one_minus_eps)
    cfg = dataclasses.replace(cfg, settings=(setting,)).validate()
    table = resolve_table(cfg, args.method, None)
    ctrl = make_controller(args.method, cfg, cfg.target_speed(setting.v_init), 1.0 - setting.one_minus_eps, table)
    res = run_trial(cfg.scenario, ctrl, cfg.t_end, setting_seed(cfg.seed, setting), setting.x_init, setting.v_init,
                    trial=args.trial)
    res.trajectory.to_csv(out / "trajectory.csv")
    res.trajectory.diagnostics_to_csv(out / "diagnostics.csv")
    result = {"method": args.method, "safe": res.safe, "traveling_time": res.traveling_time,
              "min_distance": res.min_distance, "collision_time": res.collision_time}
    _write_json(out / "result.json", result)
    print(json.dumps(result, sort_keys=True))
    _manifest(out, args, cfg, ["trajectory.csv", "diagnostics.csv", "result.json"])
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> int:
    rows = evaluate_all(cfg, workers=args.workers)
    checks = embedded_checks(rows, cfg.seed)
    trend = None
    if args.check_trend:
        if not cfg.table:
            raise MissingTableError("--check-trend needs a table: pass --set table=<path>")
        trend = trend_check(load_table(cfg.table, cfg.scenario, cfg.risk))
        checks.append(CheckResult("risk-trend", trend.passed, "; ".join(trend.lines())))
    _write_summaries(out / "summary.csv", rows)
    _write_json(out / "summary.json", {
        "summaries": [s.to_dict() for s in rows],
        "checks": [dataclasses.asdict(c) for c in checks],
        "traveling_time": "time to termination; collided trials count with their collision time",
    })
    _manifest(out, args, cfg, ["summary.csv", "summary.json"])
    return _report(checks)


def cmd_sweep(args, cfg: ExperimentConfig, out: Path) -> int:
    rows = evaluate_all(cfg, workers=args.workers)
    points = tradeoff_sweep(rows)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("method", "mean_p_safe", "normalized_time"))
        for pt in points:
            w.writerow((pt.method, pt.mean_p_safe, pt.normalized_time))
    _write_summaries(out / "summary.csv", rows)
    _write_json(out / "summary.json", {"points": [dataclasses.asdict(p) for p in points],
                                        "summaries": [s.to_dict() for s in rows]})
    _manifest(out, args, cfg, ["sweep.csv", "summary.csv", "summary.json"])
    for pt in points:
        print(f"{pt.method}: P_safe={pt.mean_p_safe:.3f} time_share={pt.normalized_time:.3f}")
    return EXIT_OK


def cmd_ablate(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.alpha:
        etas = args.eta or list(ALPHA_ETAS)
        rows = alpha_ablation(cfg, etas, ALPHA_SETTING, args.n_trials, workers=args.workers)
        _write_summaries(out / "alpha.csv", rows)
        _write_json(out / "summary.json", {"summaries": [s.to_dict() for s in rows]})
        _manifest(out, args, cfg, ["alpha.csv", "summary.json"])
        for s in rows:
            print(f"eta={s.eta:g}: P_safe={s.p_safe:.3f} mean_t={s.mean_t:.2f}")
        return EXIT_OK
    if not args.tables:
        raise UsageError("--distribution needs at least one --table NAME=PATH")
    tables = {}
    for spec in args.tables:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"--table expects NAME=PATH, got {spec!r}")
        tables[name] = load_table(path)
    results = distribution_ablation(cfg, tables, ALPHA_SETTING, args.n_trials, workers=args.workers)
    files = ["distribution.csv", "summary.json"]
    with open(out / "distribution.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("distribution",) + SUMMARY_FIELDS)
        for r in results:
            d = r.summary.to_dict()
            w.writerow([r.name] + ["" if d[f] is None else d[f] for f in SUMMARY_FIELDS])
    for r in results:
        r.trace.to_csv(out / f"trace_{r.name}.csv")
        r.trace.diagnostics_to_csv(out / f"diagnostics_{r.name}.csv")
        files += [f"trace_{r.name}.csv", f"diagnostics_{r.name}.csv"]
        print(f"distribution {r.name}: P_safe={r.summary.p_safe:.3f} mean_t={r.summary.mean_t:.2f}")
    _write_json(out / "summary.json", {"summaries": {r.name: r.summary.to_dict() for r in results}})
    _manifest(out, args, cfg, files)
    return EXIT_OK


COMMANDS = {"build-table": cmd_build_table, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        argv = sys.argv[1:] if argv is None else list(argv)
        args = build_parser().parse_args(argv)
        args.argv = argv
        cfg = _load(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError, TableError, FileNotFoundError) as exc:
        print(f"occsafe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
