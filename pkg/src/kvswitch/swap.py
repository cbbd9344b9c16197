"""Per-iteration swap machinery: queue state, in-flight transfers, conflicts,
and the adaptive sync/async swap-in decision.

Concurrency is modeled with timestamps only: one serial dispatcher issues
copy ops for both directions, and each direction owns an execution pipeline.
Nothing here runs on real threads; the whole module replays deterministically.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .core import RequestId, SimTime, elapsed
from .costmodel import TransferParams
from .cpu_store import SwapPlan

R_INFO_WINDOW = 64


@dataclass
class SwapEvent:
    """One r_info entry: a dispatched swap and its modeled timing."""

    iteration: int
    request: RequestId
    direction: str
    ops: int
    blocks: int
    dispatch_done: SimTime
    exec_done: SimTime
    conflicts: int = 0


@dataclass
class OpRecord:
    """GPU extent touched by one in-flight copy op, busy until exec_done."""

    gpu_start: int
    gpu_len: int
    exec_done: SimTime


@dataclass
class InFlightSwap:
    request: RequestId
    direction: str
    plan: SwapPlan
    dispatch_done: SimTime
    exec_done: SimTime
    op_records: list[OpRecord]

    def completed(self, clock: SimTime) -> bool:
        return clock >= self.exec_done


@dataclass
class QueueState:
    """The four scheduling queues; every live request sits in exactly one."""

    waiting: list[RequestId] = field(default_factory=list)
    running: list[RequestId] = field(default_factory=list)
    swapped: list[RequestId] = field(default_factory=list)
    ongoing_swap_in: list[RequestId] = field(default_factory=list)
    r_info: deque[SwapEvent] = field(default_factory=lambda: deque(maxlen=R_INFO_WINDOW))

    def _queues(self) -> dict[str, list[RequestId]]:
        return {
            "waiting": self.waiting,
            "running": self.running,
            "swapped": self.swapped,
            "ongoing_swap_in": self.ongoing_swap_in,
        }

    def location(self, req: RequestId) -> Optional[str]:
        for name, q in self._queues().items():
            if req in q:
                return name
        return None

    def move(self, req: RequestId, dst: str) -> None:
        for q in self._queues().values():
            if req in q:
                q.remove(req)
        self._queues()[dst].append(req)

    def remove(self, req: RequestId) -> None:
        for q in self._queues().values():
            if req in q:
                q.remove(req)

    def validate_partition(self, live: Iterable[RequestId]) -> None:
        live = set(live)
        seen: set[RequestId] = set()
        for name, q in self._queues().items():
            for req in q:
                if req in seen:
                    raise AssertionError(f"request {req} appears in two queues")
                seen.add(req)
        if seen != live:
            raise AssertionError(
                f"queues cover {sorted(seen)} but live set is {sorted(live)}"
            )


@dataclass
class StrategyDecision:
    mode: str  # "async" | "sync"
    reason: str  # small_short_requests | long_transfers | idle_io | forced_sync


def decide_mode(
    pending_drain: SimTime,
    pending_max_footprint: int,
    iter_estimate: SimTime,
    sync_threshold_ratio: float,
    short_request_blocks: int,
    forced: Optional[str] = None,
) -> StrategyDecision:
    """Sync only when the pending swap-ins are short and drain fast.

    A quick drain of small requests is cheaper to absorb as one stall than
    to carry across iterations; long transfers overlap with inference.
    """
    if forced == "sync":
        return StrategyDecision(mode="sync", reason="forced_sync")
    if pending_max_footprint == 0:
        return StrategyDecision(mode="async", reason="idle_io")
    if (
        pending_drain < sync_threshold_ratio * iter_estimate
        and pending_max_footprint < short_request_blocks
    ):
        return StrategyDecision(mode="sync", reason="small_short_requests")
    return StrategyDecision(mode="async", reason="long_transfers")


class SwapManager:
    """Owns the dispatcher/copy-engine timelines and all in-flight swaps."""

    def __init__(self, params: TransferParams, split_ops_to_single_blocks: bool = False,
                 bytes_per_block: int = 131072) -> None:
        self.params = params
        self.split_single = split_ops_to_single_blocks
        self.bytes_per_block = bytes_per_block
        self.dispatcher_free_at: SimTime = 0
        self.ops_since_yield = 0
        self.engine_free_at: dict[str, SimTime] = {"in": 0, "out": 0}
        self.in_flight: list[InFlightSwap] = []
        self.busy_extents: list[OpRecord] = []  # D2H sources still executing
        self.events_log: list[SwapEvent] = []
        self.total_ops = {"in": 0, "out": 0}
        self.total_blocks = {"in": 0, "out": 0}

    # -- step 1: completions ---------------------------------------------------

    def pop_completed(self, clock: SimTime) -> list[InFlightSwap]:
        """Drain finished swaps in exec_done order (sequential event checks)."""
        done = [s for s in self.in_flight if s.completed(clock)]
        done.sort(key=lambda s: (s.exec_done, s.request))
        self.in_flight = [s for s in self.in_flight if not s.completed(clock)]
        self.busy_extents = [r for r in self.busy_extents if r.exec_done > clock]
        return done

    def pending_swap_ins(self) -> list[InFlightSwap]:
        return [s for s in self.in_flight if s.direction == "in"]

    # -- steps 2 & 3: dispatch -------------------------------------------------------

    def _op_sizes(self, plan: SwapPlan) -> list[tuple[int, int, int]]:
        """(gpu_start, blocks, bytes) per op, split to single blocks in fixed mode."""
        out = []
        for op in plan.ops:
            if self.split_single:
                for i in range(op.blocks):
                    out.append((op.gpu_start + i, 1, self.bytes_per_block))
            else:
                out.append((op.gpu_start, op.blocks, op.blocks * self.bytes_per_block))
        return out

    def dispatch(
        self,
        clock: SimTime,
        iteration: int,
        plan: SwapPlan,
        not_before: SimTime = 0,
    ) -> InFlightSwap:
        """Queue a swap's ops on the dispatcher and its direction's copy engine.

        `not_before` delays execution (not dispatch) until a dependency such
        as the same request's previous transfer has finished.
        """
        ops = self._op_sizes(plan)
        dispatch_at = max(clock, self.dispatcher_free_at)
        exec_free = max(self.engine_free_at[plan.direction], not_before)
        records: list[OpRecord] = []
        for gpu_start, blocks, nbytes in ops:
            dispatch_at += self.params.dispatch_per_op
            self.ops_since_yield = (self.ops_since_yield + 1) % self.params.sync_batch
            exec_free = max(exec_free, dispatch_at) + self.params.exec_time(nbytes)
            records.append(OpRecord(gpu_start=gpu_start, gpu_len=blocks, exec_done=exec_free))
        dispatch_done = dispatch_at
        exec_done = exec_free if ops else max(clock, not_before)
        self.dispatcher_free_at = dispatch_done
        self.engine_free_at[plan.direction] = exec_done

        flight = InFlightSwap(
            request=plan.request,
            direction=plan.direction,
            plan=plan,
            dispatch_done=dispatch_done,
            exec_done=exec_done,
            op_records=records,
        )
        self.in_flight.append(flight)
        if plan.direction == "out":
            # Freed source blocks become grantable immediately; these records
            # are what grants get conflict-checked against.
            self.busy_extents.extend(records)
        self.total_ops[plan.direction] += len(ops)
        self.total_blocks[plan.direction] += plan.moved_blocks
        event = SwapEvent(
            iteration=iteration,
            request=plan.request,
            direction=plan.direction,
            ops=len(ops),
            blocks=plan.moved_blocks,
            dispatch_done=dispatch_done,
            exec_done=exec_done,
        )
        self.events_log.append(event)
        return flight

    # -- step 3.1: conflicts ---------------------------------------------------------

    def detect_conflicts(
        self, clock: SimTime, grants: list[tuple[int, int]]
    ) -> list[OpRecord]:
        """New grants intersecting GPU extents of still-executing transfers."""
        conflicts = []
        for start, length in grants:
            for rec in self.busy_extents:
                if rec.exec_done > clock and start < rec.gpu_start + rec.gpu_len and rec.gpu_start < start + length:
                    conflicts.append(rec)
        return conflicts

    @staticmethod
    def resolve_conflicts(clock: SimTime, conflicts: list[OpRecord]) -> SimTime:
        """Stall until the last blocking op's execution finishes."""
        if not conflicts:
            return 0
        return max(elapsed(rec.exec_done, clock) for rec in conflicts)

    # -- dispatch-queue yield --------------------------------------------------------

    def yield_stall(self, clock: SimTime) -> SimTime:
        """Wait for the dispatcher's next yield point before critical ops run.

        Between yield points at most sync_batch swap dispatches occupy the
        queue, so the stall is bounded by sync_batch * dispatch_per_op.
        """
        if self.dispatcher_free_at <= clock:
            return 0
        backlog_ops = -(-(self.dispatcher_free_at - clock) // self.params.dispatch_per_op)
        to_next_yield = self.params.sync_batch - self.ops_since_yield
        if to_next_yield == self.params.sync_batch:
            to_next_yield = 0  # sitting exactly on a yield boundary
        return min(backlog_ops, to_next_yield) * self.params.dispatch_per_op

    # -- r_info ------------------------------------------------------------------------

    def record_event(self, qs: QueueState, event: SwapEvent) -> None:
        qs.r_info.append(event)

    @staticmethod
    def r_info_summary(qs: QueueState) -> dict[str, float]:
        if not qs.r_info:
            return {"events": 0, "ops": 0, "blocks": 0, "mean_exec_us": 0.0}
        execs = [max(0, e.exec_done - e.dispatch_done) for e in qs.r_info]
        return {
            "events": len(qs.r_info),
            "ops": sum(e.ops for e in qs.r_info),
            "blocks": sum(e.blocks for e in qs.r_info),
            "mean_exec_us": sum(execs) / len(execs),
        }
