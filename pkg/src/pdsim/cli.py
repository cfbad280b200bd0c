"""Command-line entry point.

Subcommands: run a single simulation, sweep an arrival-rate grid, dump the
decode CU profile, or compare engines against the hybrid baseline.  A few
environment variables (PDSIM_CONFIG, PDSIM_QPS, PDSIM_SEED, PDSIM_ENGINES,
PDSIM_OUT_DIR, PDSIM_PARALLEL) override the config between file and flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from pdsim.config import ConfigError, RunPlan, apply_env_overrides, load_config
from pdsim.costmodel import build_profile, profile_lines
from pdsim.metrics import write_requests_csv, write_summary_csv
from pdsim.runner import compare, render_compare, run_one, sweep, write_compare_csv


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "-c",
        "--config",
        default=os.environ.get("PDSIM_CONFIG"),
        help="YAML config path (or set PDSIM_CONFIG)",
    )
    parser.add_argument("--out", help="output directory override")
    parser.add_argument(
        "--debug-events", action="store_true", help="log every simulator event to stderr"
    )


def _load_plan(args: argparse.Namespace) -> RunPlan:
    if not args.config:
        raise ConfigError("no config given: pass -c/--config or set PDSIM_CONFIG")
    plan = apply_env_overrides(load_config(args.config))
    if args.out:
        plan = replace(plan, out_dir=args.out)
    return plan


def _summary_line(summary) -> str:
    return (
        f"{summary.engine} qps={summary.qps:g} tokens/s={summary.tokens_per_s:.1f} "
        f"req/s={summary.requests_per_s:.3f} goodput={summary.goodput:.3f} "
        f"ttft_p95={summary.ttft_p95_us / 1e3:.1f}ms itl_p95={summary.itl_p95_us / 1e3:.1f}ms "
        f"compute={summary.compute_util:.2f} mem={summary.mem_util:.2f}"
    )


def _parallel_workers(args: argparse.Namespace) -> int:
    if getattr(args, "parallel", None) is not None:
        return args.parallel
    return int(os.environ.get("PDSIM_PARALLEL", "0"))


def _cmd_run(args: argparse.Namespace) -> int:
    plan = _load_plan(args)
    if args.engine:
        plan = replace(plan, engines=(args.engine,))
    if args.qps is not None:
        if plan.workload is None:
            raise ConfigError("--qps: cannot override qps of a trace workload")
        plan = replace(plan, workload=replace(plan.workload, qps=args.qps))
    if args.seed is not None:
        if plan.workload is None:
            raise ConfigError("--seed: cannot override seed of a trace workload")
        plan = replace(plan, workload=replace(plan.workload, seed=args.seed))
    label = plan.engines[0]
    result = run_one(plan, label)
    os.makedirs(plan.out_dir, exist_ok=True)
    write_requests_csv(os.path.join(plan.out_dir, "requests.csv"), result.rows)
    write_summary_csv(os.path.join(plan.out_dir, "summary.csv"), [result.summary])
    print(_summary_line(result.summary))
    return 0


def _qps_tag(qps: float) -> str:
    return f"{qps:g}".replace(".", "p")


def _cmd_sweep(args: argparse.Namespace) -> int:
    plan = _load_plan(args)
    results = sweep(plan, parallel=_parallel_workers(args))
    os.makedirs(plan.out_dir, exist_ok=True)
    write_summary_csv(
        os.path.join(plan.out_dir, "summary.csv"), [r.summary for r in results]
    )
    for result in results:
        name = f"requests-{result.summary.engine}-q{_qps_tag(result.summary.qps)}.csv"
        write_requests_csv(os.path.join(plan.out_dir, name), result.rows)
        print(_summary_line(result.summary))
    return 0


def _cmd_profile(args: argparse.Namespace) -> int:
    plan = _load_plan(args)
    profile = build_profile(
        plan.model, plan.gpu.aggregate(plan.tp), plan.cost, plan.slo.itl_slo_us
    )
    lines = profile_lines(profile)
    if args.out_file:
        with open(args.out_file, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    plan = _load_plan(args)
    results = sweep(plan, parallel=_parallel_workers(args))
    os.makedirs(plan.out_dir, exist_ok=True)
    write_summary_csv(
        os.path.join(plan.out_dir, "summary.csv"), [r.summary for r in results]
    )
    report = compare(results, baseline=args.baseline)
    write_compare_csv(os.path.join(plan.out_dir, "compare.csv"), report)
    print(render_compare(report))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="pdsim",
        description="Discrete-event simulator for LLM serving engines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one engine once")
    _add_common(run_p)
    run_p.add_argument("--engine", help="engine label override (e.g. hybrid-512)")
    run_p.add_argument("--qps", type=float, help="arrival rate override")
    run_p.add_argument("--seed", type=int, help="workload seed override")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run every engine across the qps grid")
    _add_common(sweep_p)
    sweep_p.add_argument("--parallel", type=int, help="worker processes (default serial)")
    sweep_p.set_defaults(func=_cmd_sweep)

    profile_p = sub.add_parser("profile", help="print the decode CU allocation profile")
    _add_common(profile_p)
    profile_p.add_argument("--out-file", help="write profile lines to a file")
    profile_p.set_defaults(func=_cmd_profile)

    compare_p = sub.add_parser("compare", help="sweep and normalize against a baseline")
    _add_common(compare_p)
    compare_p.add_argument("--parallel", type=int, help="worker processes (default serial)")
    compare_p.add_argument("--baseline", default="hybrid-512", help="baseline engine label")
    compare_p.set_defaults(func=_cmd_compare)

    args = parser.parse_args(argv)
    if args.debug_events:
        logging.basicConfig(stream=sys.stderr, format="%(name)s %(message)s")
        logging.getLogger("pdsim.sim").setLevel(logging.DEBUG)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"pdsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
