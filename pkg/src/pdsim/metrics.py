"""Measurement: per-request latency accounting, SLO attainment, CSV output.

All rates are computed over a measurement window that skips an initial
warm-up slice of the horizon; a request belongs to the window iff it arrived
inside it.  Percentiles are nearest-rank, so every reported percentile is an
actually observed sample.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from pdsim.core import Request, RequestState
from pdsim.kvcache import BlockPool

WARMUP_FRACTION = 0.10

ITL_STATS = ("max", "p95", "mean")


@dataclass(frozen=True)
class SloSpec:
    """Latency targets a request must meet to count toward goodput.

    The time-to-first-token budget scales with prompt length in whole steps:
    one second per started thousand prompt tokens.  The inter-token budget is
    judged by ``itl_stat`` over a request's observed gaps.
    """

    itl_slo_us: int = 100_000
    itl_stat: str = "max"
    ttft_us_per_1k_prompt: int = 1_000_000

    def __post_init__(self) -> None:
        if self.itl_slo_us < 1:
            raise ValueError("itl_slo_us must be >= 1")
        if self.itl_stat not in ITL_STATS:
            raise ValueError(f"itl_stat must be one of {ITL_STATS}")
        if self.ttft_us_per_1k_prompt < 1:
            raise ValueError("ttft_us_per_1k_prompt must be >= 1")


def ttft_ceiling_us(prompt_tokens: int, slo: SloSpec) -> int:
    if prompt_tokens < 1:
        raise ValueError("prompt_tokens must be >= 1")
    return math.ceil(prompt_tokens / 1000) * slo.ttft_us_per_1k_prompt


def percentile_nearest_rank(values: list[int] | list[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not values:
        raise ValueError("no samples")
    if not (0.0 < pct <= 100.0):
        raise ValueError("pct must be in (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def itl_samples_us(req: Request) -> list[int]:
    stamps = req.token_times_us
    return [stamps[i + 1] - stamps[i] for i in range(len(stamps) - 1)]


@dataclass(frozen=True)
class RequestRow:
    id: int
    arrival_us: int
    prompt_tokens: int
    output_tokens: int
    ttft_us: int
    itl_max_us: int
    itl_p95_us: int
    meets_ttft: bool
    meets_itl: bool


def evaluate_request(req: Request, slo: SloSpec) -> RequestRow:
    """Fold one request's stamps into the per-request metrics row.

    Missing first token reports -1; a request with fewer than two tokens has
    no gaps and reports 0 for both ITL columns (vacuously inside any SLO).
    """
    ttft = req.first_token_us - req.arrival_us if req.token_times_us else -1
    gaps = itl_samples_us(req)
    itl_max = max(gaps) if gaps else 0
    itl_p95 = int(percentile_nearest_rank(gaps, 95.0)) if gaps else 0
    itl_mean = sum(gaps) / len(gaps) if gaps else 0.0
    meets_ttft = 0 <= ttft <= ttft_ceiling_us(req.prompt_tokens, slo)
    judged = {"max": itl_max, "p95": itl_p95, "mean": itl_mean}[slo.itl_stat]
    meets_itl = judged <= slo.itl_slo_us
    return RequestRow(
        id=req.id,
        arrival_us=req.arrival_us,
        prompt_tokens=req.prompt_tokens,
        output_tokens=req.output_tokens,
        ttft_us=ttft,
        itl_max_us=itl_max,
        itl_p95_us=itl_p95,
        meets_ttft=meets_ttft,
        meets_itl=meets_itl,
    )


def busy_fraction(intervals: list[tuple[int, int, float]], start_us: int, end_us: int) -> float:
    """Time-weighted device usage over [start, end] from (start, end, fraction)
    busy intervals, clipping concurrent overlap at a whole device."""
    if end_us <= start_us:
        return 0.0
    points: dict[int, float] = {}
    for s, e, frac in intervals:
        lo, hi = max(s, start_us), min(e, end_us)
        if hi <= lo:
            continue
        points[lo] = points.get(lo, 0.0) + frac
        points[hi] = points.get(hi, 0.0) - frac
    if not points:
        return 0.0
    area = 0.0
    level = 0.0
    prev: int | None = None
    for t in sorted(points):
        if prev is not None:
            area += min(1.0, level) * (t - prev)
        level += points[t]
        prev = t
    return area / (end_us - start_us)


@dataclass(frozen=True)
class Summary:
    engine: str
    qps: float
    tokens_per_s: float
    requests_per_s: float
    goodput: float
    itl_goodput: float
    ttft_p95_us: float
    itl_p95_us: float
    compute_util: float
    mem_util: float


def summarize(
    engine_label: str,
    qps: float,
    requests: list[Request],
    slo: SloSpec,
    horizon_us: int,
    busy_intervals: dict[str, list[tuple[int, int, float]]],
    pools: dict[str, BlockPool],
) -> Summary:
    """Aggregate a run into one summary row.

    Window rates count only requests that arrived inside the post-warm-up
    window; delivered-token throughput counts every stamp in the window
    regardless of its request's fate, since the device did that work.
    """
    cut_us = int(horizon_us * WARMUP_FRACTION)
    window_s = (horizon_us - cut_us) / 1e6
    if window_s <= 0:
        raise ValueError("empty measurement window")

    counted = [r for r in requests if r.arrival_us >= cut_us]
    finished = [r for r in counted if r.state is RequestState.FINISHED]
    rows = {r.id: evaluate_request(r, slo) for r in finished}

    ok_itl = [r for r in finished if rows[r.id].meets_itl]
    ok_both = [r for r in ok_itl if rows[r.id].meets_ttft]

    window_stamps = sum(
        1 for r in requests for t in r.token_times_us if cut_us <= t <= horizon_us
    )

    ttfts = [rows[r.id].ttft_us for r in finished if rows[r.id].ttft_us >= 0]
    pooled_gaps = [g for r in finished for g in itl_samples_us(r)]

    compute = 0.0
    if busy_intervals:
        compute = sum(
            busy_fraction(iv, cut_us, horizon_us) for iv in busy_intervals.values()
        ) / len(busy_intervals)
    mem = 0.0
    if pools:
        mem = sum(p.utilization(cut_us, horizon_us) for p in pools.values()) / len(pools)

    return Summary(
        engine=engine_label,
        qps=qps,
        tokens_per_s=window_stamps / window_s,
        requests_per_s=len(finished) / window_s,
        goodput=len(ok_both) / window_s,
        itl_goodput=len(ok_itl) / window_s,
        ttft_p95_us=percentile_nearest_rank(ttfts, 95.0) if ttfts else -1.0,
        itl_p95_us=percentile_nearest_rank(pooled_gaps, 95.0) if pooled_gaps else 0.0,
        compute_util=compute,
        mem_util=mem,
    )


REQUEST_COLUMNS = (
    "id",
    "arrival_us",
    "prompt_tokens",
    "output_tokens",
    "ttft_us",
    "itl_max_us",
    "itl_p95_us",
    "meets_ttft",
    "meets_itl",
)

SUMMARY_COLUMNS = (
    "engine",
    "qps",
    "tokens_per_s",
    "requests_per_s",
    "goodput",
    "itl_goodput",
    "ttft_p95_us",
    "itl_p95_us",
    "compute_util",
    "mem_util",
)


def write_requests_csv(path: str, rows: list[RequestRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REQUEST_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.id,
                    row.arrival_us,
                    row.prompt_tokens,
                    row.output_tokens,
                    row.ttft_us,
                    row.itl_max_us,
                    row.itl_p95_us,
                    int(row.meets_ttft),
                    int(row.meets_itl),
                ]
            )


def write_summary_csv(path: str, rows: list[Summary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow(
                [row.engine]
                + [
                    f"{value:.6f}"
                    for value in (
                        row.qps,
                        row.tokens_per_s,
                        row.requests_per_s,
                        row.goodput,
                        row.itl_goodput,
                        row.ttft_p95_us,
                        row.itl_p95_us,
                        row.compute_util,
                        row.mem_util,
                    )
                ]
            )
