"""Intra-GPU prefill/decode concurrency with adaptive CU allocation.

Prefill and decode run as two independently clocked streams on one logical
device.  Each stream hides its host-side batch preparation behind the other
iteration's GPU time (a stream restarting from idle still pays it), and at
every iteration launch the allocator decides whether the streams share the
whole device or get pinned to disjoint CU fractions.

Because the next decode batch is composed while the current one runs, a
sequence that emits its final token still rides along for exactly one more
(non-delivering) iteration before its cache is torn down.
"""

from __future__ import annotations

from collections import deque

from pdsim.core import (
    OVERALLOCATE,
    AllocationMode,
    GpuSpec,
    ModelSpec,
    Request,
    RequestState,
)
from pdsim.costmodel import (
    CostParams,
    allocate,
    build_profile,
    decode_time,
    overlapped_times,
    prefill_time,
)
from pdsim.engines import EngineBase
from pdsim.kvcache import BlockPool, InsufficientCapacity
from pdsim.metrics import SloSpec
from pdsim.sim import Event, EventKind, Simulation


class RapidEngine(EngineBase):
    def __init__(
        self,
        model: ModelSpec,
        gpu: GpuSpec,
        params: CostParams,
        slo: SloSpec,
        chunk_tokens: int = 2048,
        max_batch: int = 256,
    ) -> None:
        super().__init__(model, gpu, params, slo)
        if chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self.label = "rapid"
        self.chunk_tokens = chunk_tokens
        self.max_batch = max_batch
        self.pool = BlockPool.for_device(model, gpu, name="gpu0")
        self.pools = {"gpu0": self.pool}
        self.busy_intervals = {"gpu0": []}
        self.profile = build_profile(model, gpu, params, slo.itl_slo_us)
        self.current_alloc = OVERALLOCATE

        self.pending_kv: list[Request] = []
        self.waiting_prefill: deque[Request] = deque()
        self._target: dict[int, int] = {}

        # Prefill stream.
        self.p_head: Request | None = None
        self.p_written = 0
        self.p_inflight = False
        self.p_inflight_chunk = 0
        self.p_prev_end = -1
        self.p_prev_gpu = 0

        # Decode stream.  ``lame`` holds sequences whose final token is out
        # but that were already baked into the next batch composition.
        self.decoding: list[Request] = []
        self.lame: list[Request] = []
        self.d_inflight = False
        self.d_inflight_batch = 0
        self.d_inflight_kv = 0
        self.d_prev_end = -1
        self.d_prev_gpu = 0

    # ------------------------------------------------------------------
    # Admission.
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
        self._p_kick(sim)

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

    # ------------------------------------------------------------------
    # Stream clocking: a chained iteration hides batch preparation behind
    # the previous GPU time; an idle restart exposes it in full.
    # ------------------------------------------------------------------

    def _stream_gap(self, now: int, prev_end: int, prev_gpu: int) -> int:
        if now == prev_end and prev_gpu > 0:
            return max(0, self.cpu_us - prev_gpu)
        return self.cpu_us

    def _decode_active(self) -> int:
        if self.d_inflight:
            return self.d_inflight_batch
        return len(self.decoding) + len(self.lame)

    def _next_chunk_tokens(self) -> int:
        """Prefill tokens poised to run: the in-flight chunk, or the next one."""
        if self.p_inflight:
            return self.p_inflight_chunk
        if self.p_head is not None:
            return min(self.chunk_tokens, self._target[self.p_head.id] - self.p_written)
        if self.waiting_prefill:
            head = self.waiting_prefill[0]
            return min(self.chunk_tokens, self._target[head.id])
        return 0

    # ------------------------------------------------------------------
    # Prefill stream.
    # ------------------------------------------------------------------

    def _p_kick(self, sim: Simulation) -> None:
        if self.p_inflight:
            return
        now = sim.now_us
        if self.p_head is None:
            if not self.waiting_prefill:
                return
            head = self.waiting_prefill.popleft()
            head.advance(RequestState.PREFILLING, now)
            head.container = "prefilling"
            self.p_head = head
            self.p_written = 0
        chunk = min(self.chunk_tokens, self._target[self.p_head.id] - self.p_written)
        decision = allocate(
            self.profile,
            self._decode_active(),
            chunk,
            self.slo.itl_slo_us,
            self.model,
            self.gpu,
            self.params,
        )
        self.current_alloc = decision
        if decision.mode is AllocationMode.PARTITION:
            cu_p = decision.cu_fraction_prefill
            gpu_us = prefill_time(
                chunk, cu_p, self.model, self.gpu, self.params, concurrent=self.d_inflight
            )
        else:
            cu_p = 1.0
            if self.d_inflight:
                gpu_us, _ = overlapped_times(
                    chunk,
                    self.d_inflight_batch,
                    self.d_inflight_kv,
                    OVERALLOCATE,
                    self.model,
                    self.gpu,
                    self.params,
                )
            else:
                gpu_us = prefill_time(chunk, 1.0, self.model, self.gpu, self.params)
        start = now + self._stream_gap(now, self.p_prev_end, self.p_prev_gpu)
        end = start + gpu_us
        self._record_busy("gpu0", start, end, cu_p)
        self.p_inflight = True
        self.p_inflight_chunk = chunk
        sim.schedule(
            end, EventKind.PREFILL_ITER_DONE, request=self.p_head, chunk=chunk, gpu_us=gpu_us
        )

    def on_prefill_iter_done(self, sim: Simulation, ev: Event) -> None:
        now = sim.now_us
        req: Request = ev.data["request"]
        self.p_inflight = False
        self.p_inflight_chunk = 0
        self.p_prev_end = now
        self.p_prev_gpu = ev.data["gpu_us"]
        self.p_written += ev.data["chunk"]
        if self.p_written == self._target[req.id]:
            req.advance(RequestState.PREFILL_FINISHED, now)
            req.advance(RequestState.DECODING, now)
            req.container = "decoding"
            self.decoding.append(req)
            self.p_head = None
            self._d_kick(sim)
        self._admit(sim.now_us)
        self._p_kick(sim)

    # ------------------------------------------------------------------
    # Decode stream.
    # ------------------------------------------------------------------

    def _preempt(self, victim: Request, now: int) -> None:
        victim.advance(RequestState.PENDING_KV, now, preemption=True)
        victim.container = "pending_kv"
        self.pool.release(victim.id, now)
        self.decoding.remove(victim)
        self._insort_fcfs(self.pending_kv, victim)

    def _reserve_decode_slots(self, members: list[Request], now: int) -> list[Request]:
        idx = 0
        while idx < len(members):
            req = members[idx]
            if req.delivered_tokens >= req.output_tokens:
                idx += 1  # lame duck: no further token, no extension
                continue
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

    def _d_kick(self, sim: Simulation) -> None:
        if self.d_inflight:
            return
        now = sim.now_us
        take = max(0, self.max_batch - len(self.lame))
        members = self._reserve_decode_slots(list(self.lame) + list(self.decoding[:take]), now)
        if not members:
            return
        decision = allocate(
            self.profile,
            len(members),
            self._next_chunk_tokens(),
            self.slo.itl_slo_us,
            self.model,
            self.gpu,
            self.params,
        )
        self.current_alloc = decision
        total_kv = sum(r.context_tokens for r in members)
        if decision.mode is AllocationMode.PARTITION:
            cu_d = decision.cu_fraction_decode
            gpu_us = decode_time(
                len(members),
                total_kv,
                cu_d,
                self.model,
                self.gpu,
                self.params,
                concurrent=self.p_inflight,
            )
        else:
            cu_d = 1.0
            if self.p_inflight:
                _, gpu_us = overlapped_times(
                    self.p_inflight_chunk,
                    len(members),
                    total_kv,
                    OVERALLOCATE,
                    self.model,
                    self.gpu,
                    self.params,
                )
            else:
                gpu_us = decode_time(
                    len(members), total_kv, 1.0, self.model, self.gpu, self.params
                )
        start = now + self._stream_gap(now, self.d_prev_end, self.d_prev_gpu)
        end = start + gpu_us
        self._record_busy("gpu0", start, end, cu_d)
        self.d_inflight = True
        self.d_inflight_batch = len(members)
        self.d_inflight_kv = total_kv
        sim.schedule(end, EventKind.DECODE_ITER_DONE, members=tuple(members), gpu_us=gpu_us)

    def on_decode_iter_done(self, sim: Simulation, ev: Event) -> None:
        now = sim.now_us
        members: tuple[Request, ...] = ev.data["members"]
        self.d_inflight = False
        self.d_prev_end = now
        self.d_prev_gpu = ev.data["gpu_us"]
        for req in members:
            req.decode_participations += 1
            if req.delivered_tokens >= req.output_tokens:
                req.advance(RequestState.FINISHED, now)
                req.container = ""
                self.pool.release(req.id, now)
                self.lame.remove(req)
                continue
            req.deliver_token(now)
            if req.delivered_tokens == req.output_tokens:
                self.decoding.remove(req)
                req.container = "lame"
                self.lame.append(req)
        self._admit(now)
        self._d_kick(sim)
        self._p_kick(sim)

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
