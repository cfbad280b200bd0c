"""Run orchestration: single runs, sweeps, and engine comparisons.

Every run is a pure function of its plan, so sweep points can be farmed out
to worker processes and still produce byte-identical output to a serial
sweep; rows are sorted by (engine, qps) either way.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from pdsim.config import RunPlan, engine_family
from pdsim.core import RequestState
from pdsim.engines import EngineBase, build_engine
from pdsim.metrics import RequestRow, Summary, evaluate_request, summarize
from pdsim.sim import Simulation
from pdsim.workload import load_trace, synthesize


@dataclass(frozen=True)
class RunResult:
    summary: Summary
    rows: list[RequestRow]


def _materialize_workload(plan: RunPlan, qps: float | None):
    if plan.trace_path is not None:
        items = load_trace(plan.trace_path)
        if not items:
            raise ValueError(f"trace {plan.trace_path} is empty")
        horizon = plan.horizon_us
        duration_s = (horizon if horizon is not None else items[-1].arrival_us) / 1e6
        offered = len(items) / duration_s if duration_s > 0 else 0.0
        return items, horizon, offered
    spec = plan.workload
    assert spec is not None
    if qps is not None:
        spec = replace(spec, qps=qps)
    items = synthesize(spec)
    return items, int(spec.duration_s * 1e6), spec.qps


def check_invariants(engine: EngineBase) -> None:
    """Cross-check the run's final state; any failure is a simulator bug."""
    problems: list[str] = []
    for name, pool in engine.pools.items():
        if pool.used_blocks != 0:
            problems.append(f"pool {name} still holds {pool.used_blocks} blocks")
    for req in engine.requests:
        if req.state not in (RequestState.FINISHED, RequestState.REJECTED):
            problems.append(f"request {req.id} ended non-terminal in {req.state.value}")
        if req.state is RequestState.FINISHED and req.delivered_tokens != req.output_tokens:
            problems.append(
                f"request {req.id} finished with {req.delivered_tokens}/"
                f"{req.output_tokens} tokens"
            )
        back_edges = sum(
            1
            for (a, _), (b, _) in zip(req.history, req.history[1:])
            if (a, b) == (RequestState.DECODING, RequestState.PENDING_KV)
        )
        if back_edges != req.preemptions:
            problems.append(f"request {req.id} preemption count mismatch")
        if any(t1 > t2 for (_, t1), (_, t2) in zip(req.history, req.history[1:])):
            problems.append(f"request {req.id} history times not monotone")
    if problems:
        raise RuntimeError("post-run invariant violations: " + "; ".join(problems[:5]))


def run_one(plan: RunPlan, label: str, qps: float | None = None) -> RunResult:
    items, horizon_us, offered_qps = _materialize_workload(plan, qps)
    engine = build_engine(
        label,
        plan.model,
        plan.gpu,
        plan.tp,
        plan.cost,
        plan.slo,
        plan.engine_params.get(engine_family(label), {}),
    )
    sim = Simulation(until_us=horizon_us)
    engine.prime(sim, items)
    sim.run(engine.on_event)
    check_invariants(engine)
    rows = [evaluate_request(r, plan.slo) for r in engine.requests]
    summary = summarize(
        engine.label,
        offered_qps,
        engine.requests,
        plan.slo,
        sim.horizon_us,
        engine.busy_intervals,
        engine.pools,
    )
    return RunResult(summary, rows)


def _sweep_worker(task: tuple[RunPlan, str, float]) -> RunResult:
    plan, label, qps = task
    return run_one(plan, label, qps)


def sweep(plan: RunPlan, parallel: int = 0) -> list[RunResult]:
    """Run every engine at every sweep point, sorted by (engine, qps).

    ``parallel`` > 1 fans tasks out to that many worker processes; results
    are identical to a serial sweep in content and order.
    """
    if not plan.sweep_qps:
        raise ValueError("plan has no sweep.qps grid")
    tasks = [(plan, label, qps) for label in plan.engines for qps in plan.sweep_qps]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_sweep_worker, tasks))
    else:
        results = [_sweep_worker(task) for task in tasks]
    return sorted(results, key=lambda r: (r.summary.engine, r.summary.qps))


@dataclass(frozen=True)
class CompareRow:
    engine: str
    geo_mean_tokens_ratio: float
    capacity_qps: float


@dataclass(frozen=True)
class CompareReport:
    baseline: str
    rows: list[CompareRow]


CAPACITY_ATTAINMENT = 0.9


def compare(results: list[RunResult], baseline: str = "hybrid-512") -> CompareReport:
    """Normalize a sweep against a baseline engine.

    Reports, per engine, the geometric mean of its delivered-token throughput
    ratio across the qps grid, and its capacity: the highest swept qps at
    which goodput still covers at least 90% of the offered load.
    """
    by_engine: dict[str, dict[float, Summary]] = {}
    for result in results:
        by_engine.setdefault(result.summary.engine, {})[result.summary.qps] = result.summary
    if baseline not in by_engine:
        raise ValueError(f"baseline engine {baseline!r} not present in sweep results")
    base = by_engine[baseline]
    rows = []
    for engine, points in sorted(by_engine.items()):
        ratios = []
        for qps, summary in points.items():
            if qps in base and base[qps].tokens_per_s > 0:
                ratios.append(summary.tokens_per_s / base[qps].tokens_per_s)
        if ratios and all(r > 0 for r in ratios):
            geo = math.exp(sum(math.log(r) for r in ratios) / len(ratios))
        else:
            geo = 0.0
        attained = [q for q, s in points.items() if q > 0 and s.goodput / q >= CAPACITY_ATTAINMENT]
        rows.append(CompareRow(engine, geo, max(attained) if attained else 0.0))
    return CompareReport(baseline, rows)


def render_compare(report: CompareReport) -> str:
    lines = [
        f"normalized to {report.baseline} (tokens/s geo-mean over swept qps; "
        f"capacity = max qps with goodput >= {CAPACITY_ATTAINMENT:.0%} of offered)",
        f"{'engine':<14} {'tokens_ratio':>12} {'capacity_qps':>12}",
    ]
    for row in report.rows:
        lines.append(
            f"{row.engine:<14} {row.geo_mean_tokens_ratio:>12.3f} {row.capacity_qps:>12.2f}"
        )
    return "\n".join(lines)


def write_compare_csv(path: str, report: CompareReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("engine,geo_mean_tokens_ratio,capacity_qps\n")
        for row in report.rows:
            fh.write(f"{row.engine},{row.geo_mean_tokens_ratio:.6f},{row.capacity_qps:.6f}\n")
