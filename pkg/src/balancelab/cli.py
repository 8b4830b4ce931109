"""balancelab command line: simulation sweeps, worker sweeps, and the live proxy."""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from .config import (
    ConfigError,
    load_config,
    matrix_from_config,
    proxy_from_config,
    section_get,
)
from .core import BalanceError
from .harness import DEFAULT_WORKER_COUNTS, emit, run_matrix, worker_sweep
from .proxy import serve
from .simcluster import ENVIRONMENTS
from .workload import Scenario


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balancelab",
        description="Load-balancing algorithm lab: simulate, benchmark, or proxy for real.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run the simulation matrix and emit CSV/plot data")
    sim.add_argument("--config", help="config file (flat key = value with [section]s)")
    sim.add_argument("--algos", help="comma-separated algorithm kinds to run")
    sim.add_argument("--env", help="comma-separated environments (homogeneous|heterogeneous|custom)")
    sim.add_argument("--max-total", type=int, dest="max_total", help="largest scenario size")
    sim.add_argument("--seed", type=int, help="base seed for every repetition")
    sim.add_argument("--reps", type=int, help="repetitions per cell")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes for matrix cells")
    sim.add_argument("--out", default="out", help="output directory (default: out)")

    sweep = sub.add_parser("sweep-workers", help="measure one scenario at several worker counts")
    sweep.add_argument("--counts", default=",".join(str(c) for c in DEFAULT_WORKER_COUNTS),
                       help="comma-separated worker counts")
    sweep.add_argument("--mode", choices=("sim", "proxy"), default="sim")
    sweep.add_argument("--config", help="config file")
    sweep.add_argument("--env", default="homogeneous")
    sweep.add_argument("--total", type=int, default=5000, help="requests in the scenario")
    sweep.add_argument("--period", type=float, default=60.0, help="scenario period seconds")
    sweep.add_argument("--seed", type=int, default=0)
    sweep.add_argument("--out", default="out", help="output directory")

    proxy = sub.add_parser("proxy", help="serve as a live reverse proxy until SIGINT/SIGTERM")
    proxy.add_argument("--config", required=True, help="config file with a [proxy] section")
    return parser


def _cmd_sim(args) -> int:
    sections = load_config(args.config) if args.config else {"": []}
    matrix, model, deadline_s = matrix_from_config(
        sections,
        algos_override=args.algos,
        env_override=args.env,
        max_total_override=args.max_total,
        seed_override=args.seed,
        reps_override=args.reps,
    )
    rows = run_matrix(matrix, service_model=model, jobs=max(args.jobs, 1))
    written = emit(rows, args.out, deadline_s=deadline_s)
    for path in written:
        print(path)
    return 0


def _cmd_sweep(args) -> int:
    try:
        counts = [int(c) for c in args.counts.split(",") if c.strip()]
    except ValueError:
        raise ConfigError(f"--counts: expected integers, got {args.counts!r}") from None
    sections = load_config(args.config) if args.config else {"": []}
    from .config import environment_from_config, service_model_from_config

    environment = environment_from_config(args.env, sections)
    model = service_model_from_config(sections)
    scenario = Scenario(total_requests=args.total, period_s=args.period, seed=args.seed)
    mode = "simulator" if args.mode == "sim" else "proxy"
    rows = worker_sweep(counts, scenario, environment, mode=mode, service_model=model)
    written = emit(rows, args.out, deadline_s=scenario.deadline_s)
    for path in written:
        print(path)
    return 0


def _cmd_proxy(args) -> int:
    sections = load_config(args.config)
    config = proxy_from_config(sections)
    log_path = config.access_log
    if log_path:
        with open(log_path, "a", encoding="utf-8") as log_stream:
            return serve(config, log_stream=log_stream)
    return serve(config)


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "sim":
            return _cmd_sim(args)
        if args.command == "sweep-workers":
            return _cmd_sweep(args)
        if args.command == "proxy":
            return _cmd_proxy(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except BalanceError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
