"""Hybrid batching with chunked prefill on a single logical device.

One synchronous iteration at a time.  Every running decode sequence gets a
slot in every iteration; whatever is left of the per-iteration token budget
goes to the head of the prefill queue as a chunk.  A request's first token
falls out of the iteration that finishes its prompt, so short chunk budgets
buy smoother decode latency at the price of stretched prefills.
"""

from __future__ import annotations

from collections import deque

from pdsim.core import GpuSpec, ModelSpec, Request, RequestState
from pdsim.costmodel import CostParams, hybrid_time
from pdsim.engines import EngineBase
from pdsim.kvcache import BlockPool, InsufficientCapacity
from pdsim.metrics import SloSpec
from pdsim.sim import Event, EventKind, Simulation


class HybridEngine(EngineBase):
    def __init__(
        self,
        model: ModelSpec,
        gpu: GpuSpec,
        params: CostParams,
        slo: SloSpec,
        chunk_tokens: int = 512,
        max_batch: int = 256,
    ) -> None:
        super().__init__(model, gpu, params, slo)
        if chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self.label = f"hybrid-{chunk_tokens}"
        self.chunk_tokens = chunk_tokens
        self.max_batch = max_batch
        self.pool = BlockPool.for_device(model, gpu, name="gpu0")
        self.pools = {"gpu0": self.pool}
        self.busy_intervals = {"gpu0": []}
        self.pending_kv: list[Request] = []
        self.waiting_prefill: deque[Request] = deque()
        self.decoding: list[Request] = []
        self.head: Request | None = None
        self.head_written = 0
        self.inflight = False
        # Context length each admitted request must (re)build before decoding;
        # equals the prompt for fresh requests, prompt+delivered for resumed.
        self._target: dict[int, int] = {}

    # ------------------------------------------------------------------

    def on_arrival(self, sim: Simulation, ev: Event) -> None:
        req: Request = ev.data["request"]
        now = sim.now_us
        if self.draining:
            self._reject(req, now)
            return
        if not self._fits_ever(self.pool, req.prompt_tokens + req.output_tokens):
            self._reject(req, now)
            return
        req.advance(RequestState.PENDING_KV, now)
        req.container = "pending_kv"
        self._insort_fcfs(self.pending_kv, req)
        self._admit(now)
        self._kick(sim)

    def _admit(self, now: int) -> None:
        while self.pending_kv:
            req = self.pending_kv[0]
            target = req.context_tokens
            if not self.pool.would_fit(target):
                return
            self.pending_kv.pop(0)
            self.pool.allocate(req.id, target, now)
            req.advance(RequestState.WAITING_PREFILL, now)
            req.container = "waiting_prefill"
            self._target[req.id] = target
            self.waiting_prefill.append(req)

    def _preempt(self, victim: Request, now: int) -> None:
        victim.advance(RequestState.PENDING_KV, now, preemption=True)
        victim.container = "pending_kv"
        self.pool.release(victim.id, now)
        self.decoding.remove(victim)
        self._insort_fcfs(self.pending_kv, victim)

    def _reserve_decode_slots(self, members: list[Request], now: int) -> list[Request]:
        """Ensure every member can write its next token, evicting the most
        recently arrived decoder (possibly a member) when blocks run out."""
        idx = 0
        while idx < len(members):
            req = members[idx]
            try:
                self.pool.extend_to(req.id, req.context_tokens + 1, now)
                idx += 1
            except InsufficientCapacity:
                victim = self._most_recent(self.decoding)
                self._preempt(victim, now)
                if victim in members:
                    pos = members.index(victim)
                    members.remove(victim)
                    if pos < idx:
                        idx -= 1
        return members

    def _kick(self, sim: Simulation) -> None:
        if self.inflight:
            return
        now = sim.now_us
        members = self._reserve_decode_slots(list(self.decoding[: self.max_batch]), now)
        if self.head is None and self.waiting_prefill:
            head = self.waiting_prefill.popleft()
            head.advance(RequestState.PREFILLING, now)
            head.container = "prefilling"
            self.head = head
            self.head_written = 0
        chunk = 0
        if self.head is not None:
            budget = max(0, self.chunk_tokens - len(members))
            chunk = min(budget, self._target[self.head.id] - self.head_written)
        if not members and chunk == 0:
            return
        total_kv = sum(r.context_tokens for r in members) + self.head_written
        gpu_us = hybrid_time(chunk, len(members), total_kv, self.model, self.gpu, self.params)
        start = now
        end = start + self.cpu_us + gpu_us
        self._record_busy("gpu0", start + self.cpu_us, end, 1.0)
        self.inflight = True
        kind = EventKind.PREFILL_ITER_DONE if chunk > 0 else EventKind.DECODE_ITER_DONE
        sim.schedule(end, kind, members=tuple(members), chunk=chunk)

    def _finish_iteration(self, sim: Simulation, ev: Event) -> None:
        now = sim.now_us
        self.inflight = False
        chunk: int = ev.data["chunk"]
        members: tuple[Request, ...] = ev.data["members"]
        if chunk > 0:
            head = self.head
            assert head is not None
            self.head_written += chunk
            if self.head_written == self._target[head.id]:
                head.advance(RequestState.PREFILL_FINISHED, now)
                head.advance(RequestState.DECODING, now)
                head.deliver_token(now)
                if head.delivered_tokens == head.output_tokens:
                    head.advance(RequestState.FINISHED, now)
                    head.container = ""
                    self.pool.release(head.id, now)
                else:
                    head.container = "decoding"
                    self.decoding.append(head)
                self.head = None
        for req in members:
            req.decode_participations += 1
            req.deliver_token(now)
            if req.delivered_tokens == req.output_tokens:
                req.advance(RequestState.FINISHED, now)
                req.container = ""
                self.pool.release(req.id, now)
                self.decoding.remove(req)
        self._admit(now)
        self._kick(sim)

    on_prefill_iter_done = _finish_iteration
    on_decode_iter_done = _finish_iteration

    def on_sim_end(self, sim: Simulation, ev: Event) -> None:
        now = sim.now_us
        self.draining = True
        for req in self.pending_kv:
            self._reject(req, now)
        self.pending_kv.clear()
        for req in self.waiting_prefill:
            self.pool.release(req.id, now)
            self._reject(req, now)
        self.waiting_prefill.clear()
