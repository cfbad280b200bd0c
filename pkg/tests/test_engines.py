"""Engine behavior: batching shape, token accounting, preemption, drain."""

import pytest

from pdsim.core import Request, RequestState
from pdsim.costmodel import decode_time, hybrid_time, prefill_time, transfer_time_us
from pdsim.engines import EngineBase, build_engine
from pdsim.engines.disagg import DisaggEngine
from pdsim.engines.hybrid import HybridEngine
from pdsim.engines.rapid import RapidEngine
from pdsim.kvcache import BlockPool
from pdsim.runner import check_invariants
from pdsim.sim import Event, EventKind, Simulation
from pdsim.workload import WorkloadItem


def run_engine(label, items, until_us, model, gpu, params, slo, tp=1, engine_params=None):
    engine = build_engine(label, model, gpu, tp, params, slo, dict(engine_params or {}))
    sim = Simulation(until_us=until_us)
    engine.prime(sim, items)
    sim.run(engine.on_event)
    check_invariants(engine)
    return engine


def isolated_items(n=3, prompt=2048, out=8, spacing_us=3_000_000):
    return [WorkloadItem((i + 1) * spacing_us, prompt, out) for i in range(n)]


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------


def test_build_engine_labels(model70b, gpu, params, slo):
    assert isinstance(build_engine("hybrid-512", model70b, gpu, 1, params, slo), HybridEngine)
    assert isinstance(build_engine("rapid", model70b, gpu, 1, params, slo), RapidEngine)
    assert isinstance(build_engine("disagg", model70b, gpu, 1, params, slo), DisaggEngine)
    eng = build_engine("hybrid-1024", model70b, gpu, 1, params, slo)
    assert eng.chunk_tokens == 1024
    assert eng.label == "hybrid-1024"
    with pytest.raises(ValueError, match="bad hybrid label"):
        build_engine("hybrid-abc", model70b, gpu, 1, params, slo)
    with pytest.raises(ValueError, match="unknown engine label"):
        build_engine("splitwise", model70b, gpu, 1, params, slo)
    with pytest.raises(ValueError):
        build_engine("hybrid-0", model70b, gpu, 1, params, slo)


def test_build_engine_tp_folding(model70b, gpu, params, slo):
    eng = build_engine("rapid", model70b, gpu, 2, params, slo)
    assert eng.gpu.num_cus == gpu.num_cus * 2
    # disagg nodes take their tp from engine_params, not the top-level tp
    d = build_engine("disagg", model70b, gpu, 4, params, slo, {"tp": 2})
    assert d.gpu.num_cus == gpu.num_cus * 2


def test_engine_params_forwarding(model70b, gpu, params, slo):
    eng = build_engine("hybrid-512", model70b, gpu, 1, params, slo, {"max_batch": 7})
    assert eng.max_batch == 7
    d = build_engine(
        "disagg", model70b, gpu, 1, params, slo, {"num_prefill": 2, "num_decode": 3}
    )
    assert set(d.pools) == {"prefill0", "prefill1", "decode0", "decode1", "decode2"}


def test_base_helpers(model70b, gpu, params, slo):
    a = Request(id=0, arrival_us=100, prompt_tokens=1, output_tokens=1)
    b = Request(id=1, arrival_us=50, prompt_tokens=1, output_tokens=1)
    c = Request(id=2, arrival_us=100, prompt_tokens=1, output_tokens=1)
    queue = []
    for r in (a, b, c):
        EngineBase._insort_fcfs(queue, r)
    assert queue == [b, a, c]  # by (arrival, id)
    assert EngineBase._most_recent([a, b, c]) is c


def test_unexpected_event_kind_blows_up(model70b, gpu, params, slo):
    eng = build_engine("hybrid-512", model70b, gpu, 1, params, slo)
    with pytest.raises(NotImplementedError):
        eng.on_event(Simulation(), Event(0, EventKind.TRANSFER_DONE, {}, 0))


# ---------------------------------------------------------------------------
# Latency composition for an isolated request
# ---------------------------------------------------------------------------


def test_hybrid_ttft_is_sum_of_chunk_iterations(model70b, gpu, params, slo):
    eng = run_engine(
        "hybrid-512", isolated_items(1), 30_000_000, model70b, gpu, params, slo
    )
    req = eng.requests[0]
    expected = sum(
        eng.cpu_us + hybrid_time(512, 0, 512 * i, model70b, gpu, params) for i in range(4)
    )
    assert req.first_token_us - req.arrival_us == expected


def test_rapid_ttft_is_prefill_plus_one_decode_step(model70b, gpu, params, slo):
    eng = run_engine("rapid", isolated_items(1), 30_000_000, model70b, gpu, params, slo)
    req = eng.requests[0]
    expected = (
        eng.cpu_us
        + prefill_time(2048, 1.0, model70b, gpu, params)
        + eng.cpu_us
        + decode_time(1, 2048, 1.0, model70b, gpu, params)
    )
    assert req.first_token_us - req.arrival_us == expected


def test_disagg_ttft_adds_transfer_and_ingest_step(model70b, gpu, params, slo):
    eng = run_engine(
        "disagg",
        isolated_items(1),
        30_000_000,
        model70b,
        gpu,
        params,
        slo,
        engine_params={"num_prefill": 1, "num_decode": 1, "tp": 1},
    )
    req = eng.requests[0]
    expected = (
        eng.cpu_us
        + prefill_time(2048, 1.0, model70b, gpu, params)
        + transfer_time_us(model70b, gpu, 2048)
        + 2 * (eng.cpu_us + decode_time(1, 2048, 1.0, model70b, gpu, params))
    )
    assert req.first_token_us - req.arrival_us == expected


# ---------------------------------------------------------------------------
# Token and participation accounting
# ---------------------------------------------------------------------------


def test_hybrid_first_token_rides_the_finishing_chunk(model70b, gpu, params, slo):
    eng = run_engine(
        "hybrid-512", isolated_items(3), 30_000_000, model70b, gpu, params, slo
    )
    for req in eng.requests:
        assert req.state is RequestState.FINISHED
        assert req.delivered_tokens == req.output_tokens == 8
        # the first token needs no decode iteration; the remaining N-1 do
        assert req.decode_participations == 7


def test_rapid_lame_duck_participation(model70b, gpu, params, slo):
    eng = run_engine("rapid", isolated_items(3), 30_000_000, model70b, gpu, params, slo)
    for req in eng.requests:
        assert req.state is RequestState.FINISHED
        assert req.delivered_tokens == 8
        # N delivering steps plus one trailing step that only retires the slot
        assert req.decode_participations == 9
        finish_us = req.history[-1][1]
        assert finish_us > req.token_times_us[-1]


def test_disagg_ingest_step_delivers_nothing(model70b, gpu, params, slo):
    eng = run_engine(
        "disagg",
        isolated_items(3),
        30_000_000,
        model70b,
        gpu,
        params,
        slo,
        engine_params={"num_prefill": 1, "num_decode": 1, "tp": 1},
    )
    for req in eng.requests:
        assert req.state is RequestState.FINISHED
        assert req.delivered_tokens == 8
        # one catch-up step after the transfer plus N delivering steps
        assert req.decode_participations == 9


def test_disagg_round_robin_spreads_prefills(model70b, gpu, params, slo):
    eng = run_engine(
        "disagg",
        isolated_items(4),
        40_000_000,
        model70b,
        gpu,
        params,
        slo,
        engine_params={"num_prefill": 2, "num_decode": 1, "tp": 1},
    )
    assert len(eng.busy_intervals["prefill0"]) > 0
    assert len(eng.busy_intervals["prefill1"]) > 0


def test_disagg_prefill_blocks_freed_after_transfer(model70b, gpu, params, slo):
    eng = run_engine(
        "disagg",
        isolated_items(2),
        30_000_000,
        model70b,
        gpu,
        params,
        slo,
        engine_params={"num_prefill": 1, "num_decode": 1, "tp": 1},
    )
    assert eng.pools["prefill0"].used_blocks == 0
    assert eng.pools["decode0"].used_blocks == 0


# ---------------------------------------------------------------------------
# KV pressure: preemption and resume
# ---------------------------------------------------------------------------


def shrink_pool(engine, blocks):
    pool = BlockPool(total_blocks=blocks, block_size=16, name="gpu0")
    engine.pool = pool
    engine.pools = {"gpu0": pool}
    return pool


def test_hybrid_preempts_most_recent_and_resumes(model70b, gpu, params, slo):
    engine = build_engine("hybrid-512", model70b, gpu, 1, params, slo)
    # 9 blocks = 144 tokens; two requests eventually need 6 blocks each
    shrink_pool(engine, 9)
    items = [WorkloadItem(1, 32, 50), WorkloadItem(2, 32, 50)]
    sim = Simulation(until_us=100_000_000)
    engine.prime(sim, items)
    sim.run(engine.on_event)
    check_invariants(engine)
    first, second = engine.requests
    assert first.state is RequestState.FINISHED
    assert second.state is RequestState.FINISHED
    assert first.preemptions == 0
    assert second.preemptions >= 1  # always the most recently arrived victim
    edges = [
        (a[0], b[0]) for a, b in zip(second.history, second.history[1:])
    ]
    assert (RequestState.DECODING, RequestState.PENDING_KV) in edges
    # resumed: prefilling again after the preemption
    preempt_at = edges.index((RequestState.DECODING, RequestState.PENDING_KV))
    assert (RequestState.PENDING_KV, RequestState.WAITING_PREFILL) in edges[preempt_at:]
    assert second.delivered_tokens == 50


def test_rapid_preempts_under_kv_pressure(model70b, gpu, params, slo):
    engine = build_engine("rapid", model70b, gpu, 1, params, slo)
    shrink_pool(engine, 9)
    items = [WorkloadItem(1, 32, 50), WorkloadItem(2, 32, 50)]
    sim = Simulation(until_us=100_000_000)
    engine.prime(sim, items)
    sim.run(engine.on_event)
    check_invariants(engine)
    assert all(r.state is RequestState.FINISHED for r in engine.requests)
    assert engine.requests[1].preemptions >= 1


# ---------------------------------------------------------------------------
# Admission control and drain
# ---------------------------------------------------------------------------


def test_oversize_request_rejected_at_arrival(model70b, gpu, params, slo):
    engine = build_engine("hybrid-512", model70b, gpu, 1, params, slo)
    shrink_pool(engine, 10)  # 160 tokens ever
    items = [WorkloadItem(1, 150, 50), WorkloadItem(2, 64, 8)]
    sim = Simulation(until_us=10_000_000)
    engine.prime(sim, items)
    sim.run(engine.on_event)
    check_invariants(engine)
    oversize, normal = engine.requests
    assert oversize.state is RequestState.REJECTED
    assert oversize.token_times_us == []
    assert normal.state is RequestState.FINISHED


def test_disagg_oversize_checks_both_tiers(model70b, gpu, params, slo):
    engine = build_engine(
        "disagg", model70b, gpu, 1, params, slo, {"num_prefill": 1, "num_decode": 1, "tp": 1}
    )
    d_pool = BlockPool(total_blocks=10, block_size=16, name="decode0")
    engine.pools["decode0"] = d_pool
    engine.dnodes[0].pool = d_pool
    # prompt fits the prefill tier, prompt+output overflows the decode tier
    items = [WorkloadItem(1, 150, 50)]
    sim = Simulation(until_us=10_000_000)
    engine.prime(sim, items)
    sim.run(engine.on_event)
    assert engine.requests[0].state is RequestState.REJECTED


def test_arrivals_after_horizon_are_rejected(model70b, gpu, params, slo):
    items = [WorkloadItem(1_000, 2048, 8), WorkloadItem(5_000_000, 64, 4)]
    eng = run_engine("hybrid-512", items, 1_000_000, model70b, gpu, params, slo)
    early, late = eng.requests
    assert early.state is RequestState.FINISHED
    assert late.state is RequestState.REJECTED


def test_queued_requests_rejected_at_horizon(model70b, gpu, params, slo):
    # back-to-back arrivals; the second is still queued behind the first's
    # prefill when time runs out, while the first drains to completion
    items = [WorkloadItem(1_000, 2048, 300), WorkloadItem(2_000, 2048, 300)]
    eng = run_engine("hybrid-512", items, 100_000, model70b, gpu, params, slo)
    states = {r.id: r.state for r in eng.requests}
    assert states[0] is RequestState.FINISHED
    assert states[1] is RequestState.REJECTED
    assert eng.pools["gpu0"].used_blocks == 0


def test_check_invariants_catches_corruption(model70b, gpu, params, slo):
    eng = run_engine("hybrid-512", isolated_items(1), 30_000_000, model70b, gpu, params, slo)
    eng.requests[0].token_times_us.pop()
    with pytest.raises(RuntimeError, match="finished with 7/8 tokens"):
        check_invariants(eng)
