"""Run configuration: one JSON document covering every module's knobs.

Validation is strict: unknown keys are rejected and every error names the
offending dotted key. A single top-level seed feeds all random streams;
modules derive independent generators from it via fixed labels.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .alloc import PoolConfig
from .core import BlockSpec
from .costmodel import InferParams, TransferParams
from .engine import ABLATION_MODES, EngineConfig
from .scheduler import PATTERNS, PriorityTrace, SchedulerConfig
from .workload import LengthDist, WorkloadConfig


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"config key '{key}': {message}")


_NUMBER = (int, float)

# key -> expected type(s); dicts nest. None values mean "explicitly unset".
_SCHEMA: dict[str, Any] = {
    "seed": int,
    "ablation": str,
    "block": {
        "block_size_tokens": int,
        "bytes_per_block": int,
    },
    "gpu_pool": {
        "total_blocks": int,
        "initial_group_blocks": int,
        "victim_policy": str,
    },
    "cpu_pool": {
        "total_blocks": int,
    },
    "transfer": {
        "dispatch_per_op_us": int,
        "bandwidth_bytes_per_us": int,
        "per_op_latency_floor_us": int,
        "sync_batch": int,
    },
    "inference": {
        "decode_base_us": int,
        "decode_per_token_us": int,
        "prefill_per_token_us": int,
    },
    "scheduler": {
        "max_running": (int, type(None)),
        "preemption_mode": str,
        "max_prefill_tokens": (int, type(None)),
    },
    "workload": {
        "num_conversations": int,
        "arrival_rate_per_s": _NUMBER,
        "mean_turns": _NUMBER,
        "input_tokens": {"median": _NUMBER, "sigma": _NUMBER, "max": int},
        "output_tokens": {"median": _NUMBER, "sigma": _NUMBER, "max": int},
        "think_time_mean_s": _NUMBER,
        "max_context_tokens": (int, type(None)),
        "trace_path": (str, type(None)),
    },
    "trace": {
        "pattern": str,
        "frequency": _NUMBER,
        "p_keep": _NUMBER,
    },
    "swap_policy": {
        "sync_threshold_ratio": _NUMBER,
        "short_request_blocks": int,
    },
    "reuse": {
        "prealloc_min_blocks": int,
        "prealloc_max_blocks": int,
        "release_copy_on_swap_in": bool,
    },
    "output": {
        "report_json": (str, type(None)),
        "report_csv": (str, type(None)),
        "iteration_log": (str, type(None)),
    },
}


def default_config() -> dict:
    """A complete config document with the library defaults."""
    return {
        "seed": 42,
        "ablation": "full",
        "block": {"block_size_tokens": 16, "bytes_per_block": 131072},
        "gpu_pool": {
            "total_blocks": 512,
            "initial_group_blocks": 60,
            "victim_policy": "random",
        },
        "cpu_pool": {"total_blocks": 491520},
        "transfer": {
            "dispatch_per_op_us": 12,
            "bandwidth_bytes_per_us": 32000,
            "per_op_latency_floor_us": 2,
            "sync_batch": 8,
        },
        "inference": {
            "decode_base_us": 2000,
            "decode_per_token_us": 25,
            "prefill_per_token_us": 50,
        },
        "scheduler": {
            "max_running": None,
            "preemption_mode": "swap",
            "max_prefill_tokens": None,
        },
        "workload": {
            "num_conversations": 200,
            "arrival_rate_per_s": 1.0,
            "mean_turns": 5.5,
            "input_tokens": {"median": 96.0, "sigma": 0.9, "max": 1024},
            "output_tokens": {"median": 112.0, "sigma": 0.7, "max": 512},
            "think_time_mean_s": 10.0,
            "max_context_tokens": 3072,
            "trace_path": None,
        },
        "trace": {"pattern": "markov", "frequency": 0.02, "p_keep": 0.8},
        "swap_policy": {"sync_threshold_ratio": 0.5, "short_request_blocks": 16},
        "reuse": {
            "prealloc_min_blocks": 8,
            "prealloc_max_blocks": 256,
            "release_copy_on_swap_in": False,
        },
        "output": {"report_json": None, "report_csv": None, "iteration_log": None},
    }


def _check(doc: Any, schema: Any, prefix: str) -> None:
    if isinstance(schema, dict):
        if not isinstance(doc, dict):
            raise ConfigError(prefix or "<root>", f"expected an object, got {type(doc).__name__}")
        for key in doc:
            if key not in schema:
                path = f"{prefix}.{key}" if prefix else key
                raise ConfigError(path, "unknown key")
        for key, sub in schema.items():
            if key in doc:
                path = f"{prefix}.{key}" if prefix else key
                _check(doc[key], sub, path)
        return
    expected = schema if isinstance(schema, tuple) else (schema,)
    if isinstance(doc, bool) and bool not in expected:
        raise ConfigError(prefix, "expected a number, got a boolean")
    if int in expected and isinstance(doc, float) and doc.is_integer():
        return
    if not isinstance(doc, expected):
        names = "/".join(t.__name__ for t in expected)
        raise ConfigError(prefix, f"expected {names}, got {type(doc).__name__}")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def validate(doc: dict) -> dict:
    """Merge onto defaults and type-check; returns the full document."""
    _check(doc, _SCHEMA, "")
    return _merge(default_config(), doc)


def set_by_path(doc: dict, dotted: str, value: Any) -> None:
    """Assign a (numeric) value at a dotted key path, validating it exists."""
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(dotted, "no such key")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(dotted, "no such key")
    if not isinstance(node[leaf], _NUMBER) or isinstance(node[leaf], bool):
        raise ConfigError(dotted, "not a numeric key; only numeric keys are sweepable")
    node[leaf] = value


@dataclass
class RunSettings:
    """Everything a single run needs, decoded from one document."""

    doc: dict
    engine: EngineConfig
    workload: WorkloadConfig
    trace_path: Optional[str]
    report_json: Optional[str]
    report_csv: Optional[str]
    iteration_log: Optional[str]


def _positive(section: str, key: str, value) -> None:
    if value <= 0:
        raise ConfigError(f"{section}.{key}", f"must be positive, got {value}")


def build(doc: dict) -> RunSettings:
    """Validate a document and materialize all module configurations."""
    full = validate(doc)
    seed = full["seed"]

    t = full["transfer"]
    for key in t:
        _positive("transfer", key, t[key])
    w = full["workload"]
    _positive("workload", "arrival_rate_per_s", w["arrival_rate_per_s"])

    def section(name: str, ctor, **kwargs):
        try:
            return ctor(**kwargs)
        except ValueError as exc:
            raise ConfigError(name, str(exc)) from exc

    block = section("block", BlockSpec, **full["block"])
    gpu_pool = section(
        "gpu_pool",
        PoolConfig,
        total_blocks=full["gpu_pool"]["total_blocks"],
        initial_group_blocks=full["gpu_pool"]["initial_group_blocks"],
        rng_seed=seed,
        victim_policy=full["gpu_pool"]["victim_policy"],
    )
    transfer = section(
        "transfer",
        TransferParams,
        dispatch_per_op=t["dispatch_per_op_us"],
        bandwidth=t["bandwidth_bytes_per_us"],
        per_op_latency_floor=t["per_op_latency_floor_us"],
        sync_batch=t["sync_batch"],
    )
    infer = section(
        "inference",
        InferParams,
        decode_base=full["inference"]["decode_base_us"],
        decode_per_token=full["inference"]["decode_per_token_us"],
        prefill_per_token=full["inference"]["prefill_per_token_us"],
    )
    sched = section("scheduler", SchedulerConfig, **full["scheduler"])
    trace = section(
        "trace",
        PriorityTrace,
        pattern=full["trace"]["pattern"],
        frequency=full["trace"]["frequency"],
        seed=seed,
        p_keep=full["trace"]["p_keep"],
    )
    if trace.pattern not in PATTERNS:
        raise ConfigError("trace.pattern", f"must be one of {PATTERNS}")
    if full["ablation"] not in ABLATION_MODES:
        raise ConfigError("ablation", f"must be one of {ABLATION_MODES}")

    workload = section(
        "workload",
        WorkloadConfig,
        num_conversations=w["num_conversations"],
        arrival_rate_per_s=w["arrival_rate_per_s"],
        mean_turns=w["mean_turns"],
        input_tokens=LengthDist(
            w["input_tokens"]["median"], w["input_tokens"]["sigma"], w["input_tokens"]["max"]
        ),
        output_tokens=LengthDist(
            w["output_tokens"]["median"], w["output_tokens"]["sigma"], w["output_tokens"]["max"]
        ),
        think_time_mean_s=w["think_time_mean_s"],
        max_context_tokens=w["max_context_tokens"],
        seed=seed,
    )

    engine = section(
        "engine",
        EngineConfig,
        block=block,
        gpu_pool=gpu_pool,
        cpu_pool_blocks=full["cpu_pool"]["total_blocks"],
        transfer=transfer,
        inference=infer,
        scheduler=sched,
        trace=trace,
        ablation=full["ablation"],
        sync_threshold_ratio=full["swap_policy"]["sync_threshold_ratio"],
        short_request_blocks=full["swap_policy"]["short_request_blocks"],
        prealloc_min_blocks=full["reuse"]["prealloc_min_blocks"],
        prealloc_max_blocks=full["reuse"]["prealloc_max_blocks"],
        release_copy_on_swap_in=full["reuse"]["release_copy_on_swap_in"],
    )

    out = full["output"]
    return RunSettings(
        doc=full,
        engine=engine,
        workload=workload,
        trace_path=w["trace_path"],
        report_json=out["report_json"],
        report_csv=out["report_csv"],
        iteration_log=out["iteration_log"],
    )


def load(path: str | Path) -> RunSettings:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "top level must be a JSON object")
    return build(doc)
