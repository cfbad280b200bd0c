"""Synthetic traffic generation and JSONL trace loading."""

import json

import numpy as np
import pytest

from pdsim.workload import (
    DEFAULT_SIGMA,
    OUTPUT_TOKEN_CAP,
    PROMPT_TOKEN_CAP,
    WORKLOAD_PRESETS,
    WorkloadItem,
    WorkloadSpec,
    load_trace,
    preset_spec,
    synthesize,
    with_qps,
)


def spec(**kw):
    base = dict(qps=5.0, duration_s=30.0, seed=7)
    base.update(kw)
    return WorkloadSpec(**base)


def test_arrivals_strictly_increase_within_horizon():
    items = synthesize(spec())
    times = [it.arrival_us for it in items]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert times[0] >= 1
    assert times[-1] <= 30_000_000
    # rough Poisson sanity: ~150 expected
    assert 100 <= len(items) <= 210


def test_same_seed_reproduces_exactly():
    assert synthesize(spec()) == synthesize(spec())


def test_different_seed_differs():
    assert synthesize(spec()) != synthesize(spec(seed=8))


def test_qps_sweep_shares_length_population():
    slow = synthesize(spec(qps=2.0))
    fast = synthesize(spec(qps=10.0))
    n = min(len(slow), len(fast))
    assert n > 20
    assert [(it.prompt_tokens, it.output_tokens) for it in slow[:n]] == [
        (it.prompt_tokens, it.output_tokens) for it in fast[:n]
    ]
    # but the arrival clocks differ
    assert slow[0].arrival_us != fast[0].arrival_us


def test_sigma_zero_gives_constant_lengths():
    items = synthesize(spec(sigma=0.0, mean_prompt_tokens=2048, mean_output_tokens=8))
    assert {it.prompt_tokens for it in items} == {2048}
    assert {it.output_tokens for it in items} == {8}


def test_lengths_respect_caps_and_floor():
    items = synthesize(spec(qps=50.0, sigma=4.0, mean_prompt_tokens=60000, mean_output_tokens=1))
    assert all(1 <= it.prompt_tokens <= PROMPT_TOKEN_CAP for it in items)
    assert all(1 <= it.output_tokens <= OUTPUT_TOKEN_CAP for it in items)


def test_mean_prompt_roughly_matches_target():
    items = synthesize(spec(qps=40.0, duration_s=120.0, mean_prompt_tokens=2000))
    mean = np.mean([it.prompt_tokens for it in items])
    assert 1700 <= mean <= 2300


def test_default_sigma_tail_ratio():
    # p95 of the default length distribution sits near 3x the mean
    items = synthesize(spec(qps=50.0, duration_s=200.0))
    prompts = np.array([it.prompt_tokens for it in items])
    ratio = np.percentile(prompts, 95) / prompts.mean()
    assert 2.3 <= ratio <= 3.7
    assert DEFAULT_SIGMA == 0.932


def test_spec_validation():
    for bad in (
        dict(qps=0.0),
        dict(duration_s=0.0),
        dict(mean_prompt_tokens=0),
        dict(mean_output_tokens=0),
        dict(sigma=-0.1),
    ):
        with pytest.raises(ValueError):
            spec(**bad)


def test_presets():
    s = preset_spec("long-prompt", qps=2.0, duration_s=10.0, seed=1)
    assert s.mean_prompt_tokens == 8000
    assert s.mean_output_tokens == 256
    assert set(WORKLOAD_PRESETS) == {"short-prompt", "long-prompt", "very-long-prompt"}
    with pytest.raises(ValueError, match="unknown workload preset"):
        preset_spec("huge-prompt", qps=1.0, duration_s=1.0, seed=0)


def test_with_qps_changes_only_rate():
    s = spec()
    s2 = with_qps(s, 9.0)
    assert s2.qps == 9.0
    assert (s2.seed, s2.mean_prompt_tokens, s2.sigma) == (s.seed, s.mean_prompt_tokens, s.sigma)


# ---------------------------------------------------------------------------
# Trace loading
# ---------------------------------------------------------------------------


def write_lines(tmp_path, lines):
    p = tmp_path / "trace.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(p)


def test_load_trace_roundtrip(tmp_path):
    rows = [
        {"arrival_us": 0, "prompt_tokens": 10, "output_tokens": 2},
        {"arrival_us": 1500, "prompt_tokens": 99, "output_tokens": 7},
    ]
    path = write_lines(tmp_path, [json.dumps(r) for r in rows] + [""])
    assert load_trace(path) == [
        WorkloadItem(0, 10, 2),
        WorkloadItem(1500, 99, 7),
    ]


def test_load_trace_error_carries_line_number(tmp_path):
    path = write_lines(
        tmp_path,
        [
            json.dumps({"arrival_us": 0, "prompt_tokens": 10, "output_tokens": 2}),
            "{not json",
        ],
    )
    with pytest.raises(ValueError, match=r":2: invalid JSON"):
        load_trace(path)


def test_load_trace_strict_fields(tmp_path):
    path = write_lines(
        tmp_path, [json.dumps({"arrival_us": 0, "prompt_tokens": 10, "output_tokens": 2, "qos": 1})]
    )
    with pytest.raises(ValueError, match=r":1: unexpected field\(s\): qos"):
        load_trace(path)

    path = write_lines(tmp_path, [json.dumps({"arrival_us": 0, "prompt_tokens": 10})])
    with pytest.raises(ValueError, match=r":1: missing field\(s\): output_tokens"):
        load_trace(path)


def test_load_trace_type_checks(tmp_path):
    path = write_lines(
        tmp_path, [json.dumps({"arrival_us": 0.5, "prompt_tokens": 10, "output_tokens": 2})]
    )
    with pytest.raises(ValueError, match="arrival_us must be an integer"):
        load_trace(path)

    path = write_lines(
        tmp_path, [json.dumps({"arrival_us": 0, "prompt_tokens": True, "output_tokens": 2})]
    )
    with pytest.raises(ValueError, match="prompt_tokens must be an integer"):
        load_trace(path)


def test_load_trace_value_checks(tmp_path):
    path = write_lines(
        tmp_path, [json.dumps({"arrival_us": -1, "prompt_tokens": 10, "output_tokens": 2})]
    )
    with pytest.raises(ValueError, match="arrival_us must be >= 0"):
        load_trace(path)

    path = write_lines(
        tmp_path, [json.dumps({"arrival_us": 0, "prompt_tokens": 0, "output_tokens": 2})]
    )
    with pytest.raises(ValueError, match="token counts must be >= 1"):
        load_trace(path)


def test_load_trace_sorts_with_warning(tmp_path):
    path = write_lines(
        tmp_path,
        [
            json.dumps({"arrival_us": 100, "prompt_tokens": 1, "output_tokens": 1}),
            json.dumps({"arrival_us": 50, "prompt_tokens": 2, "output_tokens": 1}),
        ],
    )
    with pytest.warns(UserWarning, match="out of order"):
        items = load_trace(path)
    assert [it.arrival_us for it in items] == [50, 100]


def test_load_trace_non_object_line(tmp_path):
    path = write_lines(tmp_path, ["[1, 2, 3]"])
    with pytest.raises(ValueError, match=r":1: expected an object"):
        load_trace(path)
