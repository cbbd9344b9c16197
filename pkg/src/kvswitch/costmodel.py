"""Deterministic timing model for GPU<->CPU transfers and inference iterations.

Transfers run through a two-stage pipeline: a serial dispatch stage that
issues one copy op at a time, and an execution stage that moves the bytes.
At fine granularity the dispatch stage dominates; consolidating ops into
larger extents is what buys the transfer speedup.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import SimTime


@dataclass(frozen=True)
class TransferParams:
    dispatch_per_op: SimTime = 12  # us consumed issuing each copy op
    bandwidth: int = 32000  # bytes per us (32 GB/s)
    per_op_latency_floor: SimTime = 2  # us
    sync_batch: int = 8  # dispatches between forced queue synchronizations

    def __post_init__(self) -> None:
        for name in ("dispatch_per_op", "bandwidth", "per_op_latency_floor", "sync_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    def exec_time(self, op_bytes: int) -> SimTime:
        """Copy-engine time for one op: latency floor plus bytes over bandwidth."""
        return self.per_op_latency_floor + (op_bytes + self.bandwidth // 2) // self.bandwidth


@dataclass(frozen=True)
class InferParams:
    decode_base: SimTime = 2000  # us fixed cost per iteration
    decode_per_token: SimTime = 25  # us per batched decode token
    prefill_per_token: SimTime = 50  # us per prompt token

    def __post_init__(self) -> None:
        if min(self.decode_base, self.decode_per_token, self.prefill_per_token) < 0:
            raise ValueError("inference costs must be nonnegative")
        if self.prefill_per_token <= self.decode_per_token:
            raise ValueError("prefill_per_token must exceed decode_per_token")


@dataclass(frozen=True)
class TransferEstimate:
    total: SimTime
    dispatch_busy: SimTime

    @property
    def dispatch_fraction(self) -> float:
        return self.dispatch_busy / self.total if self.total > 0 else 0.0


def transfer_time(op_sizes: Sequence[int], p: TransferParams) -> TransferEstimate:
    """Completion time for a batch of copy ops under the dispatch/exec pipeline.

    Dispatch emits op i at time i * dispatch_per_op; the copy engine runs ops
    in emission order, so finish_i = max(dispatch_i, finish_{i-1}) + exec_i.
    """
    if any(s < 0 for s in op_sizes):
        raise ValueError("op sizes must be nonnegative")
    if not op_sizes:
        return TransferEstimate(total=0, dispatch_busy=0)
    finish = 0
    for i, size in enumerate(op_sizes, start=1):
        dispatched = i * p.dispatch_per_op
        finish = max(dispatched, finish) + p.exec_time(size)
    return TransferEstimate(total=finish, dispatch_busy=len(op_sizes) * p.dispatch_per_op)


def iteration_time(prefill_tokens: int, decode_tokens: int, p: InferParams) -> SimTime:
    """Linear model: fixed base plus per-token prefill and decode costs."""
    if prefill_tokens < 0 or decode_tokens < 0:
        raise ValueError("token counts must be nonnegative")
    return (
        p.decode_base
        + p.decode_per_token * decode_tokens
        + p.prefill_per_token * prefill_tokens
    )


def dispatch_yield_points(n_ops: int, p: TransferParams) -> list[int]:
    """Op indices where the swap dispatch queue yields to inference-critical ops."""
    if n_ops < 0:
        raise ValueError(f"n_ops must be >= 0, got {n_ops}")
    return list(range(p.sync_batch, n_ops + 1, p.sync_batch))
