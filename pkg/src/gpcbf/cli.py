"""Command-line entry point: ``gpcbf {run,sweep,check,export}``.

Exit status is 0 on success, 2 when a run ends unsafe or a solver fails,
and 1 for other run errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from .cbf import check_spec
from .experiments import (
    SWEEP_HEADER,
    ScenarioConfig,
    SimTrace,
    build_scenario,
    default_config,
    dump_config,
    emit_plot_data,
    load_config,
    read_csv,
    run_failure_sweep,
    run_scenario,
    state_sampler,
    write_csv,
)

EXIT_OK, EXIT_ERROR, EXIT_UNSAFE = 0, 1, 2


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else default_config(args.plant)
    if args.seed is not None:
        cfg.sim.seed = args.seed
    if args.method is not None:
        cfg.baseline = args.method
    if args.duration is not None:
        cfg.sim.duration = args.duration
    return cfg.validate()


def _status(summary: dict) -> int:
    err = summary.get("error", "")
    if err.startswith(("SafetyViolated", "SolverFailure")) or summary["min_h"] < 0 or summary["min_h_substep"] < 0:
        return EXIT_UNSAFE
    return EXIT_ERROR if err else EXIT_OK


def _report(summary: dict):
    shown = {k: v for k, v in summary.items() if k != "wall_time"}
    print(json.dumps(shown, sort_keys=True, default=float))


def cmd_run(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    tr = run_scenario(cfg, trace_path=os.path.join(args.out, "trace.csv"))
    dump_config(cfg, os.path.join(args.out, "config.yaml"))
    _report(tr.summary)
    return _status(tr.summary)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    methods = [args.method] if args.method else ["ucb", "random"]
    table = run_failure_sweep(cfg, trials=args.trials, methods=methods, jobs=args.jobs)
    write_csv(os.path.join(args.out, "failure_rates.csv"), SWEEP_HEADER, table)
    for row in table:
        print("f=%-10g %-6s failure_rate=%.3f mean_samples=%.2f" % tuple(row))
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out, exist_ok=True)
    sc = build_scenario(cfg)
    rows, ok = [], True
    for spec in sc.specs:
        r = check_spec(spec, state_sampler(cfg), seed=cfg.sim.seed)
        ok &= r["ok"]
        rows.append([spec.name, r["lipschitz_ratio"], r["grad_norm"], r["fd_rel_error"], int(r["alpha_ok"]), int(r["ok"])])
        print(f"{spec.name}: {'ok' if r['ok'] else 'FAILED'} {r}")
    write_csv(
        os.path.join(args.out, "check.csv"),
        ["barrier", "lipschitz_ratio", "grad_norm", "fd_rel_error", "alpha_ok", "ok"],
        rows,
    )
    return EXIT_OK if ok else EXIT_ERROR


def cmd_export(args) -> int:
    cfg = _config(args)
    status = EXIT_OK
    if args.trace:
        header, a = read_csv(args.trace)
        trace = SimTrace(header, a.tolist())
    else:
        trace = run_scenario(cfg)
        status = _status(trace.summary)
    table = None
    if args.trials:
        methods = [args.method] if args.method else ["ucb", "random"]
        table = run_failure_sweep(cfg, trials=args.trials, methods=methods, jobs=args.jobs)
    for path in emit_plot_data(trace, args.out, table):
        print(path)
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpcbf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="scenario YAML; defaults to the built-in scenario for --plant")
        sp.add_argument("--plant", choices=["cruise", "quadrotor"], default="cruise")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", default="out")
        sp.add_argument("--method", choices=["ucb", "random"])
        sp.add_argument("--duration", type=float, help="override the simulated horizon in seconds")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name, fn, helptext in (
        ("run", cmd_run, "simulate one scenario and write trace.csv"),
        ("sweep", cmd_sweep, "failure rate versus sampling frequency"),
        ("check", cmd_check, "invariant battery on the configured barriers"),
        ("export", cmd_export, "write plot-ready CSV files"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.set_defaults(func=fn)
        if name in ("sweep", "export"):
            sp.add_argument("--trials", type=int)
            sp.add_argument("--jobs", type=int, help="worker processes for sweep trials")
        if name == "export":
            sp.add_argument("--trace", help="existing trace.csv to export instead of running")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
