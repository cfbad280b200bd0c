"""Discrete-event core.

A Simulation is a time-ordered event heap and nothing else; all behaviour
lives in the handler (the engine).  Ties are broken by scheduling order, so
runs are reproducible regardless of payload contents.  Scheduling into the
past is a bug in the caller and is treated as fatal.
"""

from __future__ import annotations

import enum
import heapq
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

log = logging.getLogger("pdsim.sim")


class CausalityError(RuntimeError):
    """An event was scheduled before the current simulation time."""


class EventKind(enum.Enum):
    ARRIVAL = "Arrival"
    PREFILL_ITER_DONE = "PrefillIterDone"
    DECODE_ITER_DONE = "DecodeIterDone"
    TRANSFER_DONE = "TransferDone"
    NOTIFY_PREFILL_READY = "NotifyPrefillReady"
    NOTIFY_KV_ALLOCATED = "NotifyKvAllocated"
    SIM_END = "SimEnd"


@dataclass
class Event:
    time_us: int
    kind: EventKind
    data: dict[str, Any] = field(default_factory=dict)
    seq: int = -1  # assigned by Simulation.schedule


class Simulation:
    """Minimal event loop: schedule events, run a handler over them in order.

    ``until_us`` marks the end of the measured horizon.  The SIM_END event is
    delivered to the handler at that time (before anything else scheduled at
    the same instant), after which the loop keeps draining whatever work the
    handler leaves in flight; with no horizon, the loop simply runs the heap
    dry.
    """

    def __init__(self, until_us: int | None = None) -> None:
        if until_us is not None and until_us < 1:
            raise ValueError("until_us must be >= 1")
        self.until_us = until_us
        self.now_us = 0
        self.last_event_us = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._ended = False
        if until_us is not None:
            self.schedule(until_us, EventKind.SIM_END)

    @property
    def ended(self) -> bool:
        """True once SIM_END has been delivered (the drain phase)."""
        return self._ended

    def schedule(self, time_us: int, kind: EventKind, **data: Any) -> Event:
        if not isinstance(kind, EventKind):
            raise TypeError(f"kind must be an EventKind, got {kind!r}")
        if time_us < self.now_us:
            raise CausalityError(
                f"cannot schedule {kind.value} at {time_us} (now {self.now_us})"
            )
        ev = Event(int(time_us), kind, data, self._seq)
        self._seq += 1
        heapq.heappush(self._heap, (ev.time_us, ev.seq, ev))
        return ev

    def run(self, handler: Callable[["Simulation", Event], None]) -> None:
        while self._heap:
            _, _, ev = heapq.heappop(self._heap)
            self.now_us = ev.time_us
            self.last_event_us = ev.time_us
            if ev.kind is EventKind.SIM_END:
                self._ended = True
            if log.isEnabledFor(logging.DEBUG):
                log.debug("t=%dus %s %s", ev.time_us, ev.kind.value, _brief(ev.data))
            handler(self, ev)

    @property
    def horizon_us(self) -> int:
        """End of the measurement window: the horizon, or the last event."""
        return self.until_us if self.until_us is not None else self.last_event_us


def _brief(data: dict[str, Any]) -> str:
    parts = []
    for key, value in data.items():
        rid = getattr(value, "id", None)
        parts.append(f"{key}={rid if rid is not None else value}")
    return " ".join(parts)
