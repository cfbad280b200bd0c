"""Disaggregated serving: dedicated prefill devices feeding decode devices.

Prefill nodes run whole prompts one request at a time; finished KV waits for
a block reservation on the paired decode node, crosses the interconnect, and
is stitched into the decode batch with one non-delivering catch-up step (the
ingest) before tokens start to flow.  Decode nodes run synchronous
continuous batching, never sharing an iteration with prefill work.
"""

from __future__ import annotations

from collections import deque

from pdsim.core import GpuSpec, ModelSpec, Request, RequestState
from pdsim.costmodel import CostParams, decode_time, prefill_time, transfer_time_us
from pdsim.engines import EngineBase
from pdsim.kvcache import BlockPool, InsufficientCapacity
from pdsim.metrics import SloSpec
from pdsim.sim import Event, EventKind, Simulation


class _PrefillNode:
    def __init__(self, name: str, pool: BlockPool) -> None:
        self.name = name
        self.pool = pool
        self.queue: deque[Request] = deque()
        self.pending: list[Request] = []
        self.busy = False


class _DecodeNode:
    def __init__(self, name: str, pool: BlockPool) -> None:
        self.name = name
        self.pool = pool
        self.decoding: list[Request] = []
        self.pending: list[Request] = []
        self.inflight = False


class DisaggEngine(EngineBase):
    def __init__(
        self,
        model: ModelSpec,
        gpu: GpuSpec,
        params: CostParams,
        slo: SloSpec,
        num_prefill: int = 1,
        num_decode: int = 1,
        max_batch: int = 256,
    ) -> None:
        super().__init__(model, gpu, params, slo)
        if num_prefill < 1 or num_decode < 1:
            raise ValueError("node counts must be >= 1")
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self.label = "disagg"
        self.max_batch = max_batch
        self.pnodes = [
            _PrefillNode(f"prefill{i}", BlockPool.for_device(model, gpu, name=f"prefill{i}"))
            for i in range(num_prefill)
        ]
        self.dnodes = [
            _DecodeNode(f"decode{i}", BlockPool.for_device(model, gpu, name=f"decode{i}"))
            for i in range(num_decode)
        ]
        self.pools = {n.name: n.pool for n in self.pnodes + self.dnodes}
        self.busy_intervals = {n.name: [] for n in self.pnodes + self.dnodes}
        self._pnode_of: dict[int, _PrefillNode] = {}
        self._dnode_of: dict[int, _DecodeNode] = {}
        # True once a request's catch-up (ingest or recompute) step has run.
        self._caught_up: dict[int, bool] = {}
        self._rr = 0

    # ------------------------------------------------------------------
    # Arrival and prefill side.
    # ------------------------------------------------------------------

    def on_arrival(self, sim: Simulation, ev: Event) -> None:
        req: Request = ev.data["request"]
        now = sim.now_us
        pnode = self.pnodes[self._rr % len(self.pnodes)]
        dnode = self.dnodes[self._rr % len(self.dnodes)]
        self._rr += 1
        if self.draining:
            self._reject(req, now)
            return
        if not self._fits_ever(pnode.pool, req.prompt_tokens) or not self._fits_ever(
            dnode.pool, req.prompt_tokens + req.output_tokens
        ):
            self._reject(req, now)
            return
        self._pnode_of[req.id] = pnode
        self._dnode_of[req.id] = dnode
        req.advance(RequestState.PENDING_KV, now)
        req.container = f"{pnode.name}.pending"
        self._insort_fcfs(pnode.pending, req)
        self._p_admit(pnode, now)
        self._p_kick(sim, pnode)

    def _p_admit(self, pnode: _PrefillNode, now: int) -> None:
        while pnode.pending:
            req = pnode.pending[0]
            if not pnode.pool.would_fit(req.prompt_tokens):
                return
            pnode.pending.pop(0)
            pnode.pool.allocate(req.id, req.prompt_tokens, now)
            req.advance(RequestState.WAITING_PREFILL, now)
            req.container = f"{pnode.name}.queue"
            pnode.queue.append(req)

    def _p_kick(self, sim: Simulation, pnode: _PrefillNode) -> None:
        if pnode.busy or not pnode.queue:
            return
        now = sim.now_us
        req = pnode.queue.popleft()
        req.advance(RequestState.PREFILLING, now)
        req.container = f"{pnode.name}.running"
        gpu_us = prefill_time(req.prompt_tokens, 1.0, self.model, self.gpu, self.params)
        end = now + self.cpu_us + gpu_us
        self._record_busy(pnode.name, now + self.cpu_us, end, 1.0)
        pnode.busy = True
        sim.schedule(end, EventKind.PREFILL_ITER_DONE, request=req)

    def on_prefill_iter_done(self, sim: Simulation, ev: Event) -> None:
        req: Request = ev.data["request"]
        now = sim.now_us
        pnode = self._pnode_of[req.id]
        pnode.busy = False
        req.advance(RequestState.PREFILL_FINISHED, now)
        req.container = f"{pnode.name}.done"
        sim.schedule(now, EventKind.NOTIFY_PREFILL_READY, request=req)
        self._p_kick(sim, pnode)

    # ------------------------------------------------------------------
    # Handoff: reserve blocks on the decode node, then move the cache.
    # ------------------------------------------------------------------

    def on_notify_prefill_ready(self, sim: Simulation, ev: Event) -> None:
        req: Request = ev.data["request"]
        dnode = self._dnode_of[req.id]
        try:
            dnode.pool.allocate(req.id, req.prompt_tokens, sim.now_us)
        except InsufficientCapacity:
            req.container = f"{dnode.name}.pending"
            self._insort_fcfs(dnode.pending, req)
            return
        sim.schedule(sim.now_us, EventKind.NOTIFY_KV_ALLOCATED, request=req)

    def on_notify_kv_allocated(self, sim: Simulation, ev: Event) -> None:
        req: Request = ev.data["request"]
        delay = transfer_time_us(self.model, self.gpu, req.prompt_tokens)
        sim.schedule(sim.now_us + delay, EventKind.TRANSFER_DONE, request=req)

    def on_transfer_done(self, sim: Simulation, ev: Event) -> None:
        req: Request = ev.data["request"]
        now = sim.now_us
        pnode = self._pnode_of[req.id]
        dnode = self._dnode_of[req.id]
        pnode.pool.release(req.id, now)
        req.advance(RequestState.DECODING, now)
        req.container = f"{dnode.name}.decoding"
        self._caught_up[req.id] = False
        dnode.decoding.append(req)
        self._p_admit(pnode, now)
        self._p_kick(sim, pnode)
        self._d_kick(sim, dnode)

    # ------------------------------------------------------------------
    # Decode side.
    # ------------------------------------------------------------------

    def _preempt(self, dnode: _DecodeNode, victim: Request, now: int) -> None:
        victim.advance(RequestState.PENDING_KV, now, preemption=True)
        victim.container = f"{dnode.name}.pending"
        dnode.pool.release(victim.id, now)
        dnode.decoding.remove(victim)
        self._insort_fcfs(dnode.pending, victim)

    def _reserve_decode_slots(self, dnode: _DecodeNode, members: list[Request], now: int) -> list[Request]:
        idx = 0
        while idx < len(members):
            req = members[idx]
            if not self._caught_up[req.id]:
                idx += 1  # catch-up step writes no new token
                continue
            try:
                dnode.pool.extend_to(req.id, req.context_tokens + 1, now)
                idx += 1
            except InsufficientCapacity:
                victim = self._most_recent(dnode.decoding)
                self._preempt(dnode, victim, now)
                if victim in members:
                    pos = members.index(victim)
                    members.remove(victim)
                    if pos < idx:
                        idx -= 1
        return members

    def _d_kick(self, sim: Simulation, dnode: _DecodeNode) -> None:
        if dnode.inflight:
            return
        now = sim.now_us
        members = self._reserve_decode_slots(dnode, list(dnode.decoding[: self.max_batch]), now)
        if not members:
            return
        total_kv = sum(r.context_tokens for r in members)
        gpu_us = decode_time(len(members), total_kv, 1.0, self.model, self.gpu, self.params)
        end = now + self.cpu_us + gpu_us
        self._record_busy(dnode.name, now + self.cpu_us, end, 1.0)
        dnode.inflight = True
        sim.schedule(end, EventKind.DECODE_ITER_DONE, members=tuple(members), node=dnode.name)

    def on_decode_iter_done(self, sim: Simulation, ev: Event) -> None:
        now = sim.now_us
        members: tuple[Request, ...] = ev.data["members"]
        dnode = next(n for n in self.dnodes if n.name == ev.data["node"])
        dnode.inflight = False
        for req in members:
            req.decode_participations += 1
            if not self._caught_up[req.id]:
                self._caught_up[req.id] = True
                continue
            req.deliver_token(now)
            if req.delivered_tokens == req.output_tokens:
                req.advance(RequestState.FINISHED, now)
                req.container = ""
                dnode.pool.release(req.id, now)
                dnode.decoding.remove(req)
        self._d_admit(sim, dnode, now)
        self._d_kick(sim, dnode)

    def _d_admit(self, sim: Simulation, dnode: _DecodeNode, now: int) -> None:
        """Retry the decode node's FCFS pending queue after any release.

        The queue mixes two kinds of waiters: freshly prefilled requests that
        need their transfer reservation, and preempted locals that rebuild
        their context with a recompute catch-up step.
        """
        while dnode.pending:
            req = dnode.pending[0]
            if not dnode.pool.would_fit(req.context_tokens):
                return
            dnode.pending.pop(0)
            dnode.pool.allocate(req.id, req.context_tokens, now)
            if req.state is RequestState.PREFILL_FINISHED:
                req.container = f"{dnode.name}.transfer"
                sim.schedule(now, EventKind.NOTIFY_KV_ALLOCATED, request=req)
            else:
                # Preempted here earlier: no cross-device move, just recompute.
                req.advance(RequestState.WAITING_PREFILL, now)
                req.advance(RequestState.PREFILLING, now)
                req.advance(RequestState.PREFILL_FINISHED, now)
                req.advance(RequestState.DECODING, now)
                req.container = f"{dnode.name}.decoding"
                self._caught_up[req.id] = False
                dnode.decoding.append(req)

    def on_sim_end(self, sim: Simulation, ev: Event) -> None:
        now = sim.now_us
        self.draining = True
        for pnode in self.pnodes:
            for req in pnode.pending:
                self._reject(req, now)
            pnode.pending.clear()
            for req in pnode.queue:
                pnode.pool.release(req.id, now)
                self._reject(req, now)
            pnode.queue.clear()
        # Decode-side waiters are all mid-request (transferring or resuming);
        # they drain rather than being rejected.
