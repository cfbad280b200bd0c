"""Discrete-event simulator for LLM serving engines.

Compares three ways of scheduling prefill and decode on the same silicon:
hybrid batching with chunked prefill, disaggregated prefill/decode across
devices, and intra-GPU prefill/decode concurrency with an adaptive compute
allocator.
"""

from pdsim.core import (
    AllocationDecision,
    AllocationMode,
    GpuSpec,
    ModelSpec,
    Request,
    RequestState,
    kv_cache_bytes,
    validate_specs,
)

__all__ = [
    "AllocationDecision",
    "AllocationMode",
    "GpuSpec",
    "ModelSpec",
    "Request",
    "RequestState",
    "kv_cache_bytes",
    "validate_specs",
]

__version__ = "0.1.0"
