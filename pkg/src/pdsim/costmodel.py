"""Analytic iteration-time model and the adaptive compute allocator.

Every batch the simulator executes is priced with a two-term roofline: a
compute term that scales with the compute-unit (CU) fraction granted to the
stream, and a memory term driven by weight and KV-cache traffic.  Achievable
memory bandwidth ramps linearly with the CU fraction until a plateau, past
which adding CUs buys nothing — this is what makes small decode allocations
viable and is the entire reason partitioning the device can work.

When prefill and decode share the whole device ("overallocate"), each stream
drags the other: a stream is charged a slice of the other's compute work,
interpolated by how much work it has in flight itself (a tiny decode batch
slips between prefill waves almost for free; a large one collides head-on).

All returned times are integer microseconds, rounded up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from pdsim.core import (
    OVERALLOCATE,
    AllocationDecision,
    AllocationMode,
    GpuSpec,
    ModelSpec,
    kv_cache_bytes,
)


@dataclass(frozen=True)
class CostParams:
    """Tunable constants of the iteration-time model.

    decode_plateau_fraction: CU fraction at which a kernel first reaches full
        HBM bandwidth; below it, achievable bandwidth scales linearly.
    interference_compute / interference_memory: multiplicative slowdown on
        the winning roofline term when the other stream is active (cache and
        memory-controller crosstalk survives even a disjoint CU partition).
    cpu_step_overhead_us: host-side work to compose and launch one batch.
    fixed_iteration_overhead_us: per-iteration device-side fixed cost
        (sampling, bookkeeping kernels) that does not scale with batch.
    contention_pivot_tokens: token count at which a stream absorbs half of
        the co-running stream's compute work under overallocation.
    """

    decode_plateau_fraction: float = 0.4
    interference_compute: float = 1.02
    interference_memory: float = 1.04
    cpu_step_overhead_us: float = 2000.0
    fixed_iteration_overhead_us: float = 50.0
    contention_pivot_tokens: int = 256


def _check_cu(cu_fraction: float) -> None:
    if not (0.0 < cu_fraction <= 1.0):
        raise ValueError(f"cu_fraction must be in (0, 1], got {cu_fraction}")


def effective_bandwidth(gpu: GpuSpec, cu_fraction: float, params: CostParams) -> float:
    """Achievable HBM bandwidth for a kernel restricted to ``cu_fraction`` CUs."""
    _check_cu(cu_fraction)
    return gpu.hbm_bandwidth * min(1.0, cu_fraction / params.decode_plateau_fraction)


def _roofline_us(
    flops: float,
    bytes_moved: float,
    cu_fraction: float,
    gpu: GpuSpec,
    params: CostParams,
    concurrent: bool,
) -> int:
    compute_s = flops / (gpu.peak_flops * cu_fraction)
    memory_s = bytes_moved / effective_bandwidth(gpu, cu_fraction, params)
    if concurrent:
        compute_s *= params.interference_compute
        memory_s *= params.interference_memory
    total_us = (
        max(compute_s, memory_s) * 1e6
        + params.fixed_iteration_overhead_us
        + gpu.kernel_launch_overhead_us
    )
    return max(1, math.ceil(total_us))


def prefill_time(
    tokens: int,
    cu_fraction: float,
    model: ModelSpec,
    gpu: GpuSpec,
    params: CostParams,
    concurrent: bool = False,
) -> int:
    """Time to prefill ``tokens`` prompt tokens in one batch.

    Reads the weights once and writes KV for every processed token; compute
    dominates for any realistic chunk size.
    """
    if tokens < 1:
        raise ValueError("prefill tokens must be >= 1")
    flops = tokens * model.flops_per_token
    bytes_moved = model.weight_bytes + kv_cache_bytes(model, tokens)
    return _roofline_us(flops, bytes_moved, cu_fraction, gpu, params, concurrent)


def decode_time(
    batch: int,
    total_kv_tokens: int,
    cu_fraction: float,
    model: ModelSpec,
    gpu: GpuSpec,
    params: CostParams,
    concurrent: bool = False,
) -> int:
    """Time for one decode step over ``batch`` sequences.

    ``total_kv_tokens`` is the summed context length across the batch; the
    step reads the weights plus all of that cache and writes one new token
    per sequence, so it is memory-bound at any practical batch size.
    """
    if batch < 1:
        raise ValueError("decode batch must be >= 1")
    if total_kv_tokens < 0:
        raise ValueError("total_kv_tokens must be >= 0")
    flops = batch * model.flops_per_token
    bytes_moved = (
        model.weight_bytes
        + kv_cache_bytes(model, total_kv_tokens)
        + kv_cache_bytes(model, batch)
    )
    return _roofline_us(flops, bytes_moved, cu_fraction, gpu, params, concurrent)


def hybrid_time(
    prefill_tokens: int,
    decode_batch: int,
    total_kv_tokens: int,
    model: ModelSpec,
    gpu: GpuSpec,
    params: CostParams,
) -> int:
    """Time for one fused iteration mixing a prefill chunk with decode steps.

    This is the chunked-prefill batch shape: one kernel stream over the whole
    device, so no cross-stream interference applies, but decode tokens stall
    behind the chunk's compute — the trade the fused approach cannot avoid.
    """
    if prefill_tokens < 0 or decode_batch < 0:
        raise ValueError("token counts must be >= 0")
    if prefill_tokens == 0 and decode_batch == 0:
        raise ValueError("iteration must contain work")
    if total_kv_tokens < 0:
        raise ValueError("total_kv_tokens must be >= 0")
    flops = (prefill_tokens + decode_batch) * model.flops_per_token
    bytes_moved = (
        model.weight_bytes
        + kv_cache_bytes(model, total_kv_tokens)
        + kv_cache_bytes(model, prefill_tokens + decode_batch)
    )
    return _roofline_us(flops, bytes_moved, 1.0, gpu, params, concurrent=False)


def contention_charge_flops(
    own_flops: float, other_flops: float, model: ModelSpec, params: CostParams
) -> float:
    """Compute work a stream absorbs from its co-runner under overallocation.

    Interpolates between zero (the stream is vanishingly small and slots into
    the other's bubbles) and the co-runner's full workload (the stream is so
    large the two serialize), with the half-way point at the pivot size.
    """
    if own_flops <= 0.0 or other_flops <= 0.0:
        return 0.0
    pivot_flops = params.contention_pivot_tokens * model.flops_per_token
    return other_flops * own_flops / (own_flops + pivot_flops)


def overlapped_times(
    prefill_tokens: int,
    decode_batch: int,
    total_kv_tokens: int,
    alloc: AllocationDecision,
    model: ModelSpec,
    gpu: GpuSpec,
    params: CostParams,
) -> tuple[int, int]:
    """Per-stream iteration times when prefill and decode run concurrently.

    Returns ``(prefill_us, decode_us)``; a stream with no work reports 0 and
    the other stream is then priced exactly as if it ran alone — an idle
    co-runner costs nothing.
    """
    if prefill_tokens < 0 or decode_batch < 0:
        raise ValueError("token counts must be >= 0")
    if prefill_tokens == 0 and decode_batch == 0:
        return (0, 0)

    if decode_batch == 0:
        cu_p = 1.0 if alloc.mode is AllocationMode.OVERALLOCATE else alloc.cu_fraction_prefill
        return (prefill_time(prefill_tokens, cu_p, model, gpu, params), 0)
    if prefill_tokens == 0:
        cu_d = 1.0 if alloc.mode is AllocationMode.OVERALLOCATE else alloc.cu_fraction_decode
        return (0, decode_time(decode_batch, total_kv_tokens, cu_d, model, gpu, params))

    if alloc.mode is AllocationMode.PARTITION:
        return (
            prefill_time(
                prefill_tokens, alloc.cu_fraction_prefill, model, gpu, params, concurrent=True
            ),
            decode_time(
                decode_batch,
                total_kv_tokens,
                alloc.cu_fraction_decode,
                model,
                gpu,
                params,
                concurrent=True,
            ),
        )

    # Both streams on all CUs: each carries its own roofline plus a slice of
    # the other stream's compute.
    w_p = prefill_tokens * model.flops_per_token
    w_d = decode_batch * model.flops_per_token
    prefill_bytes = model.weight_bytes + kv_cache_bytes(model, prefill_tokens)
    decode_bytes = (
        model.weight_bytes
        + kv_cache_bytes(model, total_kv_tokens)
        + kv_cache_bytes(model, decode_batch)
    )
    t_p = _roofline_us(
        w_p + contention_charge_flops(w_p, w_d, model, params),
        prefill_bytes,
        1.0,
        gpu,
        params,
        concurrent=True,
    )
    t_d = _roofline_us(
        w_d + contention_charge_flops(w_d, w_p, model, params),
        decode_bytes,
        1.0,
        gpu,
        params,
        concurrent=True,
    )
    return (t_p, t_d)


def transfer_time_us(model: ModelSpec, gpu: GpuSpec, tokens: int) -> int:
    """Time to move ``tokens`` worth of KV cache across the interconnect."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    if tokens == 0:
        return 0
    return math.ceil(kv_cache_bytes(model, tokens) / gpu.interconnect_bandwidth * 1e6)


# ---------------------------------------------------------------------------
# Decode CU profile and the per-iteration allocation policy.
# ---------------------------------------------------------------------------

DEFAULT_BATCH_GRID: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 48, 64, 96, 128, 160, 192, 224, 256)

DEFAULT_REFERENCE_CONTEXT = 2128


@dataclass(frozen=True)
class ProfileEntry:
    batch: int
    cu_fraction: float
    saturated: bool


@dataclass(frozen=True)
class Profile:
    """Smallest CU fraction per decode batch that holds the latency target."""

    entries: tuple[ProfileEntry, ...]
    reference_context: int
    itl_slo_us: int
    safety_margin: float

    def lookup(self, batch: int) -> ProfileEntry:
        """Entry for the smallest profiled batch >= ``batch`` (last if beyond)."""
        if batch < 1:
            raise ValueError("batch must be >= 1")
        for entry in self.entries:
            if entry.batch >= batch:
                return entry
        return self.entries[-1]

    @property
    def max_batch(self) -> int:
        return self.entries[-1].batch


def build_profile(
    model: ModelSpec,
    gpu: GpuSpec,
    params: CostParams,
    itl_slo_us: int,
    batch_grid: tuple[int, ...] = DEFAULT_BATCH_GRID,
    reference_context: int = DEFAULT_REFERENCE_CONTEXT,
    safety_margin: float = 0.9,
) -> Profile:
    """Brute-force the decode CU profile on a 1/num_cus grid.

    For each batch size, scan fractions from small to large and keep the
    first one whose decode step (priced with an active co-runner, at the
    reference per-sequence context) lands within ``safety_margin`` of the
    latency target.  Batches that miss even at the full device are marked
    saturated.
    """
    if itl_slo_us < 1:
        raise ValueError("itl_slo_us must be >= 1")
    if not (0.0 < safety_margin <= 1.0):
        raise ValueError("safety_margin must be in (0, 1]")
    if not batch_grid or list(batch_grid) != sorted(set(batch_grid)):
        raise ValueError("batch_grid must be strictly increasing and non-empty")
    target_us = itl_slo_us * safety_margin
    entries = []
    for batch in batch_grid:
        kv = batch * reference_context
        found: float | None = None
        for units in range(1, gpu.num_cus + 1):
            fraction = units / gpu.num_cus
            if decode_time(batch, kv, fraction, model, gpu, params, concurrent=True) <= target_us:
                found = fraction
                break
        entries.append(ProfileEntry(batch, found if found is not None else 1.0, found is None))
    return Profile(tuple(entries), reference_context, itl_slo_us, safety_margin)


def profile_lines(profile: Profile) -> list[str]:
    """Render a profile in the interchange format ``batch,min_fraction[,saturated]``."""
    lines = []
    for entry in profile.entries:
        line = f"{entry.batch},{entry.cu_fraction:.6f}"
        if entry.saturated:
            line += ",saturated"
        lines.append(line)
    return lines


def allocate(
    profile: Profile,
    decode_batch: int,
    prefill_pending_tokens: int,
    itl_slo_us: int,
    model: ModelSpec,
    gpu: GpuSpec,
    params: CostParams,
) -> AllocationDecision:
    """Pick the CU split for the next iteration.

    Overallocate whenever it is free (no prefill waiting) or cheap enough
    (the contended decode step still predicted inside the latency target at
    the profile's reference context).  Otherwise partition, giving decode the
    profiled minimum fraction and prefill the rest; if even the profile is
    saturated, keep one CU's worth for prefill and flag the decision.
    """
    if decode_batch < 0 or prefill_pending_tokens < 0:
        raise ValueError("counts must be >= 0")
    if prefill_pending_tokens == 0 or decode_batch == 0:
        return OVERALLOCATE

    predicted_kv = decode_batch * profile.reference_context
    _, contended_us = overlapped_times(
        prefill_pending_tokens, decode_batch, predicted_kv, OVERALLOCATE, model, gpu, params
    )
    if contended_us <= itl_slo_us:
        return OVERALLOCATE

    entry = profile.lookup(decode_batch)
    risk = entry.saturated or decode_batch > profile.max_batch
    units = round(entry.cu_fraction * gpu.num_cus)
    if entry.saturated or units >= gpu.num_cus:
        units = gpu.num_cus - 1
        risk = True
    return AllocationDecision(
        AllocationMode.PARTITION,
        cu_fraction_prefill=(gpu.num_cus - units) / gpu.num_cus,
        cu_fraction_decode=units / gpu.num_cus,
        slo_risk=risk,
    )
