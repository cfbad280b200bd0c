"""Shared domain types for the serving simulator.

Conventions used everywhere in this package:

* time is integer microseconds,
* byte counts are plain ints,
* a GpuSpec describes one *logical* device: for a tensor-parallel group the
  FLOPs, bandwidth, and capacity of the whole group are folded into a single
  spec (see ``GpuSpec.aggregate``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class RequestState(enum.Enum):
    ARRIVED = "arrived"
    PENDING_KV = "pending_kv"
    WAITING_PREFILL = "waiting_prefill"
    PREFILLING = "prefilling"
    PREFILL_FINISHED = "prefill_finished"
    DECODING = "decoding"
    FINISHED = "finished"
    REJECTED = "rejected"


# Forward (happy-path) lifecycle edges.  Rejection is reachable from any
# not-yet-running state.  The only backward edge is preemption, which puts a
# decoding request back into PENDING_KV for a fresh context rebuild; engines
# must mark that transition explicitly so accidental regressions still fail.
ALLOWED_TRANSITIONS: frozenset[tuple[RequestState, RequestState]] = frozenset(
    [
        (RequestState.ARRIVED, RequestState.PENDING_KV),
        (RequestState.PENDING_KV, RequestState.WAITING_PREFILL),
        (RequestState.WAITING_PREFILL, RequestState.PREFILLING),
        (RequestState.PREFILLING, RequestState.PREFILL_FINISHED),
        (RequestState.PREFILL_FINISHED, RequestState.DECODING),
        (RequestState.DECODING, RequestState.FINISHED),
        (RequestState.ARRIVED, RequestState.REJECTED),
        (RequestState.PENDING_KV, RequestState.REJECTED),
        (RequestState.WAITING_PREFILL, RequestState.REJECTED),
    ]
)

PREEMPTION_TRANSITION: tuple[RequestState, RequestState] = (
    RequestState.DECODING,
    RequestState.PENDING_KV,
)

TERMINAL_STATES = frozenset([RequestState.FINISHED, RequestState.REJECTED])


class InvalidTransition(RuntimeError):
    pass


@dataclass(eq=False)
class Request:
    """One inference request as it moves through an engine.

    The engine owns all mutation; this class only enforces the lifecycle
    rules and keeps the timestamps the metrics layer needs later.
    """

    id: int
    arrival_us: int
    prompt_tokens: int
    output_tokens: int
    state: RequestState = RequestState.ARRIVED
    token_times_us: list[int] = field(default_factory=list)
    decode_participations: int = 0
    preemptions: int = 0
    history: list[tuple[RequestState, int]] = field(default_factory=list)
    # Engine bookkeeping: name of the single queue/slot currently holding the
    # request. Engines assert on this to catch double residency.
    container: str = ""

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1:
            raise ValueError(f"request {self.id}: prompt_tokens must be >= 1")
        if self.output_tokens < 1:
            raise ValueError(f"request {self.id}: output_tokens must be >= 1")
        if self.arrival_us < 0:
            raise ValueError(f"request {self.id}: arrival_us must be >= 0")
        self.history.append((self.state, self.arrival_us))

    @property
    def delivered_tokens(self) -> int:
        return len(self.token_times_us)

    @property
    def first_token_us(self) -> int | None:
        return self.token_times_us[0] if self.token_times_us else None

    @property
    def context_tokens(self) -> int:
        """Tokens currently held in KV for this request."""
        return self.prompt_tokens + self.delivered_tokens

    def advance(self, new_state: RequestState, now_us: int, *, preemption: bool = False) -> None:
        edge = (self.state, new_state)
        if preemption:
            if edge != PREEMPTION_TRANSITION:
                raise InvalidTransition(f"request {self.id}: bad preemption edge {edge}")
            self.preemptions += 1
        elif edge not in ALLOWED_TRANSITIONS:
            raise InvalidTransition(f"request {self.id}: illegal transition {edge}")
        self.state = new_state
        self.history.append((new_state, now_us))

    def deliver_token(self, now_us: int) -> None:
        if self.token_times_us and now_us <= self.token_times_us[-1]:
            raise ValueError(f"request {self.id}: token timestamps must be strictly increasing")
        if self.delivered_tokens >= self.output_tokens:
            raise ValueError(f"request {self.id}: delivered past output target")
        self.token_times_us.append(now_us)


@dataclass(frozen=True)
class ModelSpec:
    """Static description of a served model, at the level the cost model needs."""

    name: str
    num_layers: int
    kv_heads: int
    head_dim: int
    bytes_per_element: int
    flops_per_token: float
    weight_bytes: float


@dataclass(frozen=True)
class GpuSpec:
    """One logical device (a whole tensor-parallel group counts as one)."""

    name: str
    num_cus: int
    peak_flops: float
    hbm_bandwidth: float
    hbm_capacity: float
    kernel_launch_overhead_us: float = 10.0
    interconnect_bandwidth: float = 5.0e10

    def aggregate(self, tp: int) -> "GpuSpec":
        """Fold a tensor-parallel group of ``tp`` devices into one logical device.

        Weights are sharded across the group, so model weight bytes are not
        scaled here; compute, bandwidth, capacity, and CU count all are.
        """
        if tp < 1:
            raise ValueError("tp must be >= 1")
        if tp == 1:
            return self
        return GpuSpec(
            name=f"{self.name}-tp{tp}",
            num_cus=self.num_cus * tp,
            peak_flops=self.peak_flops * tp,
            hbm_bandwidth=self.hbm_bandwidth * tp,
            hbm_capacity=self.hbm_capacity * tp,
            kernel_launch_overhead_us=self.kernel_launch_overhead_us,
            interconnect_bandwidth=self.interconnect_bandwidth,
        )


def kv_cache_bytes(model: ModelSpec, seq_len: int) -> int:
    """Bytes of KV cache held for ``seq_len`` tokens of one sequence.

    Keys and values are stored for every layer and KV head, one vector of
    ``head_dim`` elements each, hence the factor of two.  Pure integer math so
    doubling the sequence length exactly doubles the result.
    """
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    return (
        2
        * model.num_layers
        * seq_len
        * model.kv_heads
        * model.head_dim
        * model.bytes_per_element
    )


def validate_specs(model: ModelSpec, gpu: GpuSpec) -> list[str]:
    """Return a list of human-readable problems; empty means valid."""
    errors: list[str] = []
    for name in ("num_layers", "kv_heads", "head_dim", "bytes_per_element"):
        if getattr(model, name) <= 0:
            errors.append(f"model.{name} must be positive")
    for name in ("flops_per_token", "weight_bytes"):
        if getattr(model, name) <= 0:
            errors.append(f"model.{name} must be positive")
    if gpu.num_cus < 2:
        errors.append("num_cus must be >= 2")
    for name in (
        "peak_flops",
        "hbm_bandwidth",
        "hbm_capacity",
        "kernel_launch_overhead_us",
        "interconnect_bandwidth",
    ):
        if getattr(gpu, name) <= 0:
            errors.append(f"gpu.{name} must be positive")
    if model.weight_bytes >= gpu.hbm_capacity:
        errors.append(
            f"weights do not fit: weight_bytes={model.weight_bytes:.3e} >= "
            f"hbm_capacity={gpu.hbm_capacity:.3e}"
        )
    return errors


class AllocationMode(enum.Enum):
    OVERALLOCATE = "overallocate"
    PARTITION = "partition"


@dataclass(frozen=True)
class AllocationDecision:
    """How compute units are split between the prefill and decode streams.

    Overallocate gives both streams the whole device and lets them contend;
    Partition pins each stream to a disjoint CU fraction.  Fractions come off
    a 1/num_cus grid, so the sum check allows one part in 1e9 of float slack.
    """

    mode: AllocationMode
    cu_fraction_prefill: float
    cu_fraction_decode: float
    slo_risk: bool = False

    def __post_init__(self) -> None:
        if self.mode is AllocationMode.OVERALLOCATE:
            if self.cu_fraction_prefill != 1.0 or self.cu_fraction_decode != 1.0:
                raise ValueError("overallocate mode requires both fractions = 1.0")
        else:
            if not (0.0 < self.cu_fraction_prefill and 0.0 < self.cu_fraction_decode):
                raise ValueError("partition fractions must be positive")
            if self.cu_fraction_prefill + self.cu_fraction_decode > 1.0 + 1e-9:
                raise ValueError("partition fractions must sum to <= 1.0")


OVERALLOCATE = AllocationDecision(AllocationMode.OVERALLOCATE, 1.0, 1.0)
