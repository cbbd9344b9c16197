"""Trace-driven simulator for priority-preemptive LLM serving with
block-group KV-cache swapping, CPU-side reuse, and adaptive async swap-in."""

from .core import BlockSpec, blocks_needed, group_bytes
from .engine import Engine, EngineConfig, MetricsReport, ablation_modes, run
from .scheduler import PriorityTrace
from .workload import Conversation, WorkloadConfig, generate, ingest, write_trace

__all__ = [
    "BlockSpec",
    "blocks_needed",
    "group_bytes",
    "Engine",
    "EngineConfig",
    "MetricsReport",
    "ablation_modes",
    "run",
    "PriorityTrace",
    "Conversation",
    "WorkloadConfig",
    "generate",
    "ingest",
    "write_trace",
]
