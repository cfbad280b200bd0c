"""Workload generation and trace loading.

Synthetic traffic is Poisson arrivals with log-normal prompt and output
lengths.  Arrival times and lengths come from two independent substreams of
the same seed, so sweeping the arrival rate re-times the *same* request
population instead of reshuffling it.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

# sigma chosen so the 95th percentile of a log-normal sits at ~3x its mean, a
# heavy-but-not-absurd tail typical of production prompt-length histograms.
DEFAULT_SIGMA = 0.932

PROMPT_TOKEN_CAP = 65536
OUTPUT_TOKEN_CAP = 8192


@dataclass(frozen=True)
class WorkloadItem:
    arrival_us: int
    prompt_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class WorkloadSpec:
    qps: float
    duration_s: float
    seed: int
    mean_prompt_tokens: int = 2000
    mean_output_tokens: int = 256
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self) -> None:
        if self.qps <= 0:
            raise ValueError("qps must be positive")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.mean_prompt_tokens < 1 or self.mean_output_tokens < 1:
            raise ValueError("mean token counts must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


# Prompt-length regimes used throughout the docs and examples.
WORKLOAD_PRESETS: dict[str, dict[str, int]] = {
    "short-prompt": {"mean_prompt_tokens": 2000, "mean_output_tokens": 256},
    "long-prompt": {"mean_prompt_tokens": 8000, "mean_output_tokens": 256},
    "very-long-prompt": {"mean_prompt_tokens": 20000, "mean_output_tokens": 256},
}


def preset_spec(name: str, qps: float, duration_s: float, seed: int) -> WorkloadSpec:
    try:
        fields = WORKLOAD_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(WORKLOAD_PRESETS))
        raise ValueError(f"unknown workload preset {name!r} (known: {known})") from None
    return WorkloadSpec(qps=qps, duration_s=duration_s, seed=seed, **fields)


def _lognormal_tokens(rng: np.random.Generator, mean: int, sigma: float, cap: int) -> int:
    # Parameterize by the desired arithmetic mean: E[X] = exp(mu + sigma^2/2).
    mu = math.log(mean) - sigma * sigma / 2.0
    value = int(round(rng.lognormal(mu, sigma)))
    return max(1, min(cap, value))


def synthesize(spec: WorkloadSpec) -> list[WorkloadItem]:
    """Generate one trace.

    Substream 0 of the seed drives arrival gaps, substream 1 drives lengths,
    so two specs differing only in qps share a length sequence prefix.
    """
    arrival_rng = np.random.default_rng([spec.seed, 0])
    length_rng = np.random.default_rng([spec.seed, 1])
    horizon_us = int(spec.duration_s * 1e6)
    items: list[WorkloadItem] = []
    t_us = 0
    while True:
        gap_us = arrival_rng.exponential(1.0 / spec.qps) * 1e6
        t_us = max(t_us + 1, t_us + int(round(gap_us)))
        if t_us > horizon_us:
            break
        prompt = _lognormal_tokens(length_rng, spec.mean_prompt_tokens, spec.sigma, PROMPT_TOKEN_CAP)
        output = _lognormal_tokens(length_rng, spec.mean_output_tokens, spec.sigma, OUTPUT_TOKEN_CAP)
        items.append(WorkloadItem(t_us, prompt, output))
    return items


def with_qps(spec: WorkloadSpec, qps: float) -> WorkloadSpec:
    return replace(spec, qps=qps)


_TRACE_FIELDS = {"arrival_us", "prompt_tokens", "output_tokens"}


def load_trace(path: str) -> list[WorkloadItem]:
    """Read a JSONL trace of {arrival_us, prompt_tokens, output_tokens}.

    Field names are checked strictly and every error carries its line number.
    Out-of-order arrivals are tolerated with a warning and sorted.
    """
    items: list[WorkloadItem] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: expected an object")
            unknown = set(record) - _TRACE_FIELDS
            if unknown:
                raise ValueError(
                    f"{path}:{lineno}: unexpected field(s): {', '.join(sorted(unknown))}"
                )
            missing = _TRACE_FIELDS - set(record)
            if missing:
                raise ValueError(
                    f"{path}:{lineno}: missing field(s): {', '.join(sorted(missing))}"
                )
            for key in _TRACE_FIELDS:
                if not isinstance(record[key], int) or isinstance(record[key], bool):
                    raise ValueError(f"{path}:{lineno}: {key} must be an integer")
            if record["arrival_us"] < 0:
                raise ValueError(f"{path}:{lineno}: arrival_us must be >= 0")
            if record["prompt_tokens"] < 1 or record["output_tokens"] < 1:
                raise ValueError(f"{path}:{lineno}: token counts must be >= 1")
            items.append(
                WorkloadItem(record["arrival_us"], record["prompt_tokens"], record["output_tokens"])
            )
    if any(items[i].arrival_us > items[i + 1].arrival_us for i in range(len(items) - 1)):
        warnings.warn(f"{path}: arrivals out of order; sorting", stacklevel=2)
        items.sort(key=lambda item: item.arrival_us)
    return items
