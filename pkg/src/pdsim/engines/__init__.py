"""Serving engines: shared machinery and the label-based factory."""

from __future__ import annotations

import bisect
from typing import TYPE_CHECKING

from pdsim.core import GpuSpec, ModelSpec, Request, RequestState
from pdsim.costmodel import CostParams
from pdsim.kvcache import BlockPool
from pdsim.metrics import SloSpec
from pdsim.sim import Event, EventKind, Simulation
from pdsim.workload import WorkloadItem

if TYPE_CHECKING:
    pass

_DISPATCH = {
    EventKind.ARRIVAL: "on_arrival",
    EventKind.PREFILL_ITER_DONE: "on_prefill_iter_done",
    EventKind.DECODE_ITER_DONE: "on_decode_iter_done",
    EventKind.TRANSFER_DONE: "on_transfer_done",
    EventKind.NOTIFY_PREFILL_READY: "on_notify_prefill_ready",
    EventKind.NOTIFY_KV_ALLOCATED: "on_notify_kv_allocated",
    EventKind.SIM_END: "on_sim_end",
}


class EngineBase:
    """Common request bookkeeping for all engines.

    Subclasses own the scheduling; this class owns the request list, the
    pool/busy-interval registries the metrics layer reads, and the strictly
    FCFS admission queues.
    """

    label: str = "base"

    def __init__(
        self, model: ModelSpec, gpu: GpuSpec, params: CostParams, slo: SloSpec
    ) -> None:
        self.model = model
        self.gpu = gpu
        self.params = params
        self.slo = slo
        self.cpu_us = max(0, round(params.cpu_step_overhead_us))
        self.requests: list[Request] = []
        self.pools: dict[str, BlockPool] = {}
        self.busy_intervals: dict[str, list[tuple[int, int, float]]] = {}
        self.draining = False

    def prime(self, sim: Simulation, items: list[WorkloadItem]) -> None:
        for i, item in enumerate(items):
            req = Request(
                id=i,
                arrival_us=item.arrival_us,
                prompt_tokens=item.prompt_tokens,
                output_tokens=item.output_tokens,
            )
            self.requests.append(req)
            sim.schedule(item.arrival_us, EventKind.ARRIVAL, request=req)

    def on_event(self, sim: Simulation, ev: Event) -> None:
        getattr(self, _DISPATCH[ev.kind])(sim, ev)

    # Engines override the kinds they actually use; anything else arriving is
    # a routing bug and should blow up loudly.
    def on_arrival(self, sim: Simulation, ev: Event) -> None:
        raise NotImplementedError(f"{self.label}: unexpected {ev.kind.value}")

    def on_prefill_iter_done(self, sim: Simulation, ev: Event) -> None:
        raise NotImplementedError(f"{self.label}: unexpected {ev.kind.value}")

    def on_decode_iter_done(self, sim: Simulation, ev: Event) -> None:
        raise NotImplementedError(f"{self.label}: unexpected {ev.kind.value}")

    def on_transfer_done(self, sim: Simulation, ev: Event) -> None:
        raise NotImplementedError(f"{self.label}: unexpected {ev.kind.value}")

    def on_notify_prefill_ready(self, sim: Simulation, ev: Event) -> None:
        raise NotImplementedError(f"{self.label}: unexpected {ev.kind.value}")

    def on_notify_kv_allocated(self, sim: Simulation, ev: Event) -> None:
        raise NotImplementedError(f"{self.label}: unexpected {ev.kind.value}")

    def on_sim_end(self, sim: Simulation, ev: Event) -> None:
        self.draining = True

    # ------------------------------------------------------------------
    # Shared helpers.
    # ------------------------------------------------------------------

    @staticmethod
    def _insort_fcfs(queue: list[Request], req: Request) -> None:
        """Keep a pending queue ordered by original arrival, oldest first."""
        bisect.insort(queue, req, key=lambda r: (r.arrival_us, r.id))

    @staticmethod
    def _most_recent(reqs: list[Request]) -> Request:
        return max(reqs, key=lambda r: (r.arrival_us, r.id))

    @staticmethod
    def _reject(req: Request, now_us: int) -> None:
        req.advance(RequestState.REJECTED, now_us)
        req.container = ""

    def _record_busy(self, device: str, start_us: int, end_us: int, fraction: float) -> None:
        if end_us > start_us:
            self.busy_intervals[device].append((start_us, end_us, fraction))

    def _fits_ever(self, pool: BlockPool, tokens: int) -> bool:
        """Whether ``tokens`` could fit the pool even when it is empty."""
        return pool.blocks_for(tokens) <= pool.total_blocks


def build_engine(
    label: str,
    model: ModelSpec,
    gpu: GpuSpec,
    tp: int,
    params: CostParams,
    slo: SloSpec,
    engine_params: dict | None = None,
) -> EngineBase:
    """Instantiate an engine from its label.

    ``hybrid-<N>`` selects chunked-prefill hybrid batching with an N-token
    iteration budget; ``rapid`` the intra-GPU concurrent engine; ``disagg``
    the two-tier disaggregated deployment.  ``gpu`` is the per-device spec;
    hybrid and rapid fold ``tp`` devices into one logical engine device,
    while disagg sizes each of its nodes from its own ``tp`` setting
    (default 1) in ``engine_params``.
    """
    from pdsim.engines.disagg import DisaggEngine
    from pdsim.engines.hybrid import HybridEngine
    from pdsim.engines.rapid import RapidEngine

    opts = dict(engine_params or {})
    if label.startswith("hybrid-"):
        try:
            chunk = int(label.split("-", 1)[1])
        except ValueError:
            raise ValueError(f"bad hybrid label {label!r}; expected hybrid-<chunk>") from None
        if chunk < 1:
            raise ValueError(f"hybrid chunk budget must be >= 1, got {chunk}")
        opts.pop("chunk_tokens", None)
        return HybridEngine(model, gpu.aggregate(tp), params, slo, chunk_tokens=chunk, **opts)
    if label == "rapid":
        return RapidEngine(model, gpu.aggregate(tp), params, slo, **opts)
    if label == "disagg":
        node_tp = int(opts.pop("tp", 1))
        return DisaggEngine(model, gpu.aggregate(node_tp), params, slo, **opts)
    raise ValueError(f"unknown engine label {label!r}")
