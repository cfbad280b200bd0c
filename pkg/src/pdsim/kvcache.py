"""Paged KV-cache accounting.

A BlockPool hands out fixed-size block groups per request, all-or-nothing, so
a request either holds enough cache for its whole context or none at all.
The pool also keeps a step series of its occupancy so utilization can be
integrated over any measurement window after the run.
"""

from __future__ import annotations

import math

from pdsim.core import GpuSpec, ModelSpec, kv_cache_bytes


class InsufficientCapacity(RuntimeError):
    """Raised when an allocation or extension does not fit the pool."""


class BlockPool:
    def __init__(self, total_blocks: int, block_size: int, name: str = "pool") -> None:
        if total_blocks < 1:
            raise ValueError("total_blocks must be >= 1")
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.name = name
        self.total_blocks = total_blocks
        self.block_size = block_size
        self.used_blocks = 0
        self._holders: dict[int, int] = {}
        # (time_us, used_blocks) after every change, for occupancy integrals.
        self._occupancy: list[tuple[int, int]] = [(0, 0)]

    @classmethod
    def for_device(
        cls,
        model: ModelSpec,
        gpu: GpuSpec,
        block_size: int = 16,
        reserve_fraction: float = 0.10,
        name: str = "pool",
    ) -> "BlockPool":
        """Size a pool from what is left of HBM after weights, minus a reserve.

        The reserve absorbs activations and fragmentation we do not model.
        """
        if not (0.0 <= reserve_fraction < 1.0):
            raise ValueError("reserve_fraction must be in [0, 1)")
        budget = (gpu.hbm_capacity - model.weight_bytes) * (1.0 - reserve_fraction)
        if budget <= 0:
            raise ValueError(f"{name}: no HBM left for KV cache after weights")
        bytes_per_block = kv_cache_bytes(model, block_size)
        total_blocks = int(budget // bytes_per_block)
        if total_blocks < 1:
            raise ValueError(f"{name}: KV budget smaller than one block")
        return cls(total_blocks, block_size, name=name)

    def blocks_for(self, tokens: int) -> int:
        if tokens < 0:
            raise ValueError("tokens must be >= 0")
        return math.ceil(tokens / self.block_size)

    @property
    def free_blocks(self) -> int:
        return self.total_blocks - self.used_blocks

    def holds(self, request_id: int) -> bool:
        return request_id in self._holders

    def held_blocks(self, request_id: int) -> int:
        return self._holders.get(request_id, 0)

    def would_fit(self, tokens: int) -> bool:
        return self.blocks_for(tokens) <= self.free_blocks

    def _note(self, now_us: int) -> None:
        last_t, last_used = self._occupancy[-1]
        if now_us < last_t:
            raise ValueError(f"{self.name}: occupancy time went backwards")
        if now_us == last_t:
            self._occupancy[-1] = (now_us, self.used_blocks)
        else:
            self._occupancy.append((now_us, self.used_blocks))

    def allocate(self, request_id: int, tokens: int, now_us: int) -> None:
        """Grant blocks covering ``tokens`` in one shot, or nothing at all."""
        if request_id in self._holders:
            raise ValueError(f"{self.name}: request {request_id} already holds blocks")
        need = self.blocks_for(tokens)
        if need < 1:
            raise ValueError("allocation must cover at least one token")
        if need > self.free_blocks:
            raise InsufficientCapacity(
                f"{self.name}: need {need} blocks, {self.free_blocks} free"
            )
        self._holders[request_id] = need
        self.used_blocks += need
        self._note(now_us)

    def extend_to(self, request_id: int, tokens: int, now_us: int) -> int:
        """Grow a holding to cover ``tokens``; returns blocks newly taken.

        Shrinking never happens: a target already covered is a no-op.
        """
        held = self._holders.get(request_id)
        if held is None:
            raise ValueError(f"{self.name}: request {request_id} holds no blocks")
        need = self.blocks_for(tokens)
        if need <= held:
            return 0
        extra = need - held
        if extra > self.free_blocks:
            raise InsufficientCapacity(
                f"{self.name}: extension needs {extra} blocks, {self.free_blocks} free"
            )
        self._holders[request_id] = need
        self.used_blocks += extra
        self._note(now_us)
        return extra

    def release(self, request_id: int, now_us: int) -> int:
        """Return a request's blocks to the pool; releasing twice is a no-op."""
        held = self._holders.pop(request_id, 0)
        if held:
            self.used_blocks -= held
            self._note(now_us)
        return held

    def occupancy_integral(self, start_us: int, end_us: int) -> float:
        """Block-microseconds of occupancy accumulated inside [start, end]."""
        if end_us < start_us:
            raise ValueError("window end before start")
        total = 0.0
        for i, (t, used) in enumerate(self._occupancy):
            seg_end = (
                self._occupancy[i + 1][0] if i + 1 < len(self._occupancy) else end_us
            )
            lo = max(t, start_us)
            hi = min(seg_end, end_us)
            if hi > lo:
                total += used * (hi - lo)
        return total

    def utilization(self, start_us: int, end_us: int) -> float:
        if end_us <= start_us:
            return 0.0
        window = (end_us - start_us) * self.total_blocks
        return self.occupancy_integral(start_us, end_us) / window
