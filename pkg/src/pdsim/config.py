"""Strict YAML configuration for runs, sweeps, and comparisons.

Unknown keys are errors (reported with their dotted path), numbers written as
strings are coerced, and model/GPU presets ship inside the package.  The
philosophy: a typo in a config should fail loudly before any simulation runs.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, fields, replace
from importlib import resources

import yaml

from pdsim.core import GpuSpec, ModelSpec, validate_specs
from pdsim.costmodel import CostParams
from pdsim.metrics import ITL_STATS, SloSpec
from pdsim.workload import WORKLOAD_PRESETS, WorkloadSpec


class ConfigError(ValueError):
    pass


_HYBRID_LABEL = re.compile(r"^hybrid-(\d+)$")


def engine_family(label: str) -> str:
    """Map an engine label to its parameter family (hybrid-512 -> hybrid)."""
    if _HYBRID_LABEL.match(label):
        return "hybrid"
    if label in ("rapid", "disagg"):
        return label
    raise ConfigError(
        f"unknown engine label {label!r} (expected hybrid-<chunk>, disagg, or rapid)"
    )


@dataclass(frozen=True)
class RunPlan:
    engines: tuple[str, ...]
    model: ModelSpec
    gpu: GpuSpec
    tp: int
    workload: WorkloadSpec | None
    trace_path: str | None
    horizon_us: int | None
    slo: SloSpec
    cost: CostParams
    engine_params: dict[str, dict]
    sweep_qps: tuple[float, ...]
    out_dir: str


# ---------------------------------------------------------------------------
# Primitive coercion with dotted-path errors.
# ---------------------------------------------------------------------------


def _as_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return value


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or value is None:
        raise ConfigError(f"{path}: expected a number")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a number, got {value!r}") from None


def _as_int(value, path: str) -> int:
    f = _as_float(value, path)
    if f != int(f):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return int(f)


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value


def _check_keys(mapping: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key: {where}")


# ---------------------------------------------------------------------------
# Model / GPU specs and presets.
# ---------------------------------------------------------------------------

_MODEL_INT_FIELDS = {"num_layers", "kv_heads", "head_dim", "bytes_per_element"}
_MODEL_FLOAT_FIELDS = {"flops_per_token", "weight_bytes"}
_GPU_INT_FIELDS = {"num_cus"}
_GPU_FLOAT_FIELDS = {
    "peak_flops",
    "hbm_bandwidth",
    "hbm_capacity",
    "kernel_launch_overhead_us",
    "interconnect_bandwidth",
}


def known_presets() -> list[str]:
    root = resources.files("pdsim").joinpath("presets")
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_preset(name: str, path: str) -> dict:
    resource = resources.files("pdsim").joinpath("presets", f"{name}.yaml")
    if not resource.is_file():
        raise ConfigError(
            f"{path}: unknown preset {name!r} (known: {', '.join(known_presets())})"
        )
    data = yaml.safe_load(resource.read_text(encoding="utf-8"))
    return _as_mapping(data, path)


def _build_model(mapping: dict, path: str) -> ModelSpec:
    allowed = {f.name for f in fields(ModelSpec)}
    _check_keys(mapping, allowed, path)
    missing = sorted(allowed - set(mapping))
    if missing:
        raise ConfigError(f"{path}: missing model field(s): {', '.join(missing)}")
    kwargs: dict = {"name": _as_str(mapping["name"], f"{path}.name")}
    for key in _MODEL_INT_FIELDS:
        kwargs[key] = _as_int(mapping[key], f"{path}.{key}")
    for key in _MODEL_FLOAT_FIELDS:
        kwargs[key] = _as_float(mapping[key], f"{path}.{key}")
    return ModelSpec(**kwargs)


def _build_gpu(mapping: dict, path: str) -> GpuSpec:
    allowed = {f.name for f in fields(GpuSpec)}
    _check_keys(mapping, allowed, path)
    required = sorted(allowed - {"kernel_launch_overhead_us", "interconnect_bandwidth"})
    missing = sorted(set(required) - set(mapping))
    if missing:
        raise ConfigError(f"{path}: missing gpu field(s): {', '.join(missing)}")
    kwargs = {"name": _as_str(mapping["name"], f"{path}.name")}
    for key in _GPU_INT_FIELDS:
        kwargs[key] = _as_int(mapping[key], f"{path}.{key}")
    for key in _GPU_FLOAT_FIELDS:
        if key in mapping:
            kwargs[key] = _as_float(mapping[key], f"{path}.{key}")
    return GpuSpec(**kwargs)


def load_model_spec(value, path: str = "model") -> ModelSpec:
    if isinstance(value, str):
        return _build_model(_read_preset(value, path), path)
    return _build_model(_as_mapping(value, path), path)


def load_gpu_spec(value, path: str = "gpu") -> GpuSpec:
    if isinstance(value, str):
        return _build_gpu(_read_preset(value, path), path)
    return _build_gpu(_as_mapping(value, path), path)


# ---------------------------------------------------------------------------
# Sections.
# ---------------------------------------------------------------------------

_WORKLOAD_KEYS = {
    "preset",
    "qps",
    "duration_s",
    "seed",
    "mean_prompt_tokens",
    "mean_output_tokens",
    "sigma",
    "trace",
}


def _build_workload(mapping: dict, path: str) -> tuple[WorkloadSpec | None, str | None, int | None]:
    _check_keys(mapping, _WORKLOAD_KEYS, path)
    if "trace" in mapping:
        extra = sorted(set(mapping) - {"trace", "duration_s"})
        if extra:
            raise ConfigError(
                f"{path}.{extra[0]}: not allowed together with {path}.trace"
            )
        horizon = None
        if "duration_s" in mapping:
            horizon = int(_as_float(mapping["duration_s"], f"{path}.duration_s") * 1e6)
        return None, _as_str(mapping["trace"], f"{path}.trace"), horizon

    defaults: dict = {"mean_prompt_tokens": 2000, "mean_output_tokens": 256}
    if "preset" in mapping:
        name = _as_str(mapping["preset"], f"{path}.preset")
        if name not in WORKLOAD_PRESETS:
            raise ConfigError(
                f"{path}.preset: unknown preset {name!r} "
                f"(known: {', '.join(sorted(WORKLOAD_PRESETS))})"
            )
        defaults.update(WORKLOAD_PRESETS[name])
    for key in ("qps", "duration_s", "seed"):
        if key not in mapping:
            raise ConfigError(f"{path}.{key}: required for synthetic workloads")
    spec = WorkloadSpec(
        qps=_as_float(mapping["qps"], f"{path}.qps"),
        duration_s=_as_float(mapping["duration_s"], f"{path}.duration_s"),
        seed=_as_int(mapping["seed"], f"{path}.seed"),
        mean_prompt_tokens=_as_int(
            mapping.get("mean_prompt_tokens", defaults["mean_prompt_tokens"]),
            f"{path}.mean_prompt_tokens",
        ),
        mean_output_tokens=_as_int(
            mapping.get("mean_output_tokens", defaults["mean_output_tokens"]),
            f"{path}.mean_output_tokens",
        ),
        **(
            {"sigma": _as_float(mapping["sigma"], f"{path}.sigma")}
            if "sigma" in mapping
            else {}
        ),
    )
    return spec, None, int(spec.duration_s * 1e6)


def _build_slo(mapping: dict, path: str) -> SloSpec:
    _check_keys(mapping, {"itl_ms", "itl_stat", "ttft_s_per_1k"}, path)
    kwargs: dict = {}
    if "itl_ms" in mapping:
        kwargs["itl_slo_us"] = int(_as_float(mapping["itl_ms"], f"{path}.itl_ms") * 1000)
    if "itl_stat" in mapping:
        stat = _as_str(mapping["itl_stat"], f"{path}.itl_stat")
        if stat not in ITL_STATS:
            raise ConfigError(f"{path}.itl_stat: must be one of {', '.join(ITL_STATS)}")
        kwargs["itl_stat"] = stat
    if "ttft_s_per_1k" in mapping:
        kwargs["ttft_us_per_1k_prompt"] = int(
            _as_float(mapping["ttft_s_per_1k"], f"{path}.ttft_s_per_1k") * 1e6
        )
    return SloSpec(**kwargs)


def _build_cost(mapping: dict, path: str) -> CostParams:
    allowed = {f.name for f in fields(CostParams)}
    _check_keys(mapping, allowed, path)
    kwargs: dict = {}
    for key in allowed & set(mapping):
        if key == "contention_pivot_tokens":
            kwargs[key] = _as_int(mapping[key], f"{path}.{key}")
        else:
            kwargs[key] = _as_float(mapping[key], f"{path}.{key}")
    return CostParams(**kwargs)


_ENGINE_PARAM_KEYS = {
    "hybrid": {"max_batch"},
    "rapid": {"chunk_tokens", "max_batch"},
    "disagg": {"num_prefill", "num_decode", "tp", "max_batch"},
}


def _build_engine_params(mapping: dict, path: str) -> dict[str, dict]:
    _check_keys(mapping, set(_ENGINE_PARAM_KEYS), path)
    out: dict[str, dict] = {}
    for family, sub in mapping.items():
        sub = _as_mapping(sub, f"{path}.{family}")
        _check_keys(sub, _ENGINE_PARAM_KEYS[family], f"{path}.{family}")
        out[family] = {
            key: _as_int(value, f"{path}.{family}.{key}") for key, value in sub.items()
        }
    return out


_TOP_KEYS = {
    "model",
    "gpu",
    "tp",
    "engine",
    "engines",
    "workload",
    "slo",
    "cost",
    "engine_params",
    "sweep",
    "out_dir",
}


def plan_from_mapping(data: dict, base_dir: str = ".") -> RunPlan:
    _check_keys(data, _TOP_KEYS, "")
    for key in ("model", "gpu", "workload"):
        if key not in data:
            raise ConfigError(f"missing required config section: {key}")
    if ("engine" in data) == ("engines" in data):
        raise ConfigError("exactly one of 'engine' or 'engines' is required")

    model = load_model_spec(data["model"])
    gpu = load_gpu_spec(data["gpu"])
    problems = validate_specs(model, gpu)
    if problems:
        raise ConfigError("invalid model/gpu: " + "; ".join(problems))

    if "engine" in data:
        engines: tuple[str, ...] = (_as_str(data["engine"], "engine"),)
    else:
        raw = data["engines"]
        if not isinstance(raw, list) or not raw:
            raise ConfigError("engines: expected a non-empty list")
        engines = tuple(_as_str(v, f"engines[{i}]") for i, v in enumerate(raw))
    for label in engines:
        engine_family(label)
    if len(set(engines)) != len(engines):
        raise ConfigError("engines: duplicate labels")

    tp = _as_int(data.get("tp", 1), "tp")
    if tp < 1:
        raise ConfigError("tp: must be >= 1")

    workload, trace, horizon = _build_workload(_as_mapping(data["workload"], "workload"), "workload")
    if trace is not None and not os.path.isabs(trace):
        trace = os.path.join(base_dir, trace)

    slo = _build_slo(_as_mapping(data.get("slo", {}), "slo"), "slo")
    cost = _build_cost(_as_mapping(data.get("cost", {}), "cost"), "cost")
    engine_params = _build_engine_params(
        _as_mapping(data.get("engine_params", {}), "engine_params"), "engine_params"
    )

    sweep_qps: tuple[float, ...] = ()
    if "sweep" in data:
        sweep = _as_mapping(data["sweep"], "sweep")
        _check_keys(sweep, {"qps"}, "sweep")
        raw_qps = sweep.get("qps")
        if not isinstance(raw_qps, list) or not raw_qps:
            raise ConfigError("sweep.qps: expected a non-empty list")
        sweep_qps = tuple(_as_float(v, f"sweep.qps[{i}]") for i, v in enumerate(raw_qps))
        if workload is None:
            raise ConfigError("sweep.qps: cannot sweep a trace workload")

    out_dir = _as_str(data.get("out_dir", "runs"), "out_dir")
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(base_dir, out_dir)

    return RunPlan(
        engines=engines,
        model=model,
        gpu=gpu,
        tp=tp,
        workload=workload,
        trace_path=trace,
        horizon_us=horizon,
        slo=slo,
        cost=cost,
        engine_params=engine_params,
        sweep_qps=sweep_qps,
        out_dir=out_dir,
    )


def load_config(path: str) -> RunPlan:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return plan_from_mapping(data, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Environment overrides.
# ---------------------------------------------------------------------------


def apply_env_overrides(plan: RunPlan, env: dict | None = None) -> RunPlan:
    """Apply PDSIM_* environment overrides on top of a loaded plan."""
    env = os.environ if env is None else env
    if "PDSIM_QPS" in env:
        if plan.workload is None:
            raise ConfigError("PDSIM_QPS: cannot override qps of a trace workload")
        qps = _as_float(env["PDSIM_QPS"], "PDSIM_QPS")
        plan = replace(plan, workload=replace(plan.workload, qps=qps))
    if "PDSIM_SEED" in env:
        if plan.workload is None:
            raise ConfigError("PDSIM_SEED: cannot override seed of a trace workload")
        seed = _as_int(env["PDSIM_SEED"], "PDSIM_SEED")
        plan = replace(plan, workload=replace(plan.workload, seed=seed))
    if "PDSIM_ENGINES" in env:
        labels = tuple(
            part.strip() for part in env["PDSIM_ENGINES"].split(",") if part.strip()
        )
        if not labels:
            raise ConfigError("PDSIM_ENGINES: empty engine list")
        for label in labels:
            engine_family(label)
        plan = replace(plan, engines=labels)
    if "PDSIM_OUT_DIR" in env:
        plan = replace(plan, out_dir=env["PDSIM_OUT_DIR"])
    return plan
