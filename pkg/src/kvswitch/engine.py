"""Iteration-driven simulation loop: scheduling, swapping, token emission,
and the metrics the whole exercise exists to measure.

One iteration = one continuous-batching step. Running requests decode one
token each; newly admitted turns prefill their whole input and emit their
first token in the same iteration. The clock advances by the iteration's
compute time plus any stalls attributed to context switching.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .alloc import BlockGroup, BlockGroupPool, OutOfMemoryError, PoolConfig
from .core import BlockSpec, RequestId, SimTime, US_PER_S, blocks_needed, elapsed
from .costmodel import InferParams, TransferParams, iteration_time
from .cpu_store import ContaminatedCopyError, CpuOutOfMemoryError, CpuStore
from .scheduler import (
    Candidate,
    PriorityTrace,
    SchedulerConfig,
    apply_priority_update,
    schedule,
)
from .swap import QueueState, SwapManager, decide_mode
from .workload import Conversation

ABLATION_MODES = ("baseline", "blockgroup", "blockgroup_reuse", "full")

# Request phases.
PENDING = "pending"  # created, not yet arrived
WAITING = "waiting"
RUNNING = "running"
SWAPPED = "swapped"
SWAPPING_IN = "ongoing_swap_in"
THINKING = "thinking"
DONE = "done"

LIVE_PHASES = (WAITING, RUNNING, SWAPPED, SWAPPING_IN)

EFFICIENCY_INTERVAL_ITERS = 5
DEADLOCK_ITERATIONS = 10


class DeadlockError(RuntimeError):
    """No forward progress while live requests remain; carries a state dump."""


@dataclass(frozen=True)
class AblationMode:
    """Feature switches for one engine configuration."""

    name: str
    group_alloc: bool  # coarse block-group transfers vs single-block ops
    reuse: bool  # CPU-copy reuse credit on swap-out
    adaptive: bool  # adaptive sync/async swap-in (else always sync)


def ablation_modes() -> dict[str, AblationMode]:
    """The four incremental configurations used throughout the evaluation."""
    return {
        "baseline": AblationMode("baseline", group_alloc=False, reuse=False, adaptive=False),
        "blockgroup": AblationMode("blockgroup", group_alloc=True, reuse=False, adaptive=False),
        "blockgroup_reuse": AblationMode(
            "blockgroup_reuse", group_alloc=True, reuse=True, adaptive=False
        ),
        "full": AblationMode("full", group_alloc=True, reuse=True, adaptive=True),
    }


def _nearest_rank(n: int, q: float) -> int:
    # Guard against q*n landing epsilon above an integer.
    return max(1, math.ceil(q * n - 1e-9))


def percentile(samples: list, q: float):
    """Nearest-rank percentile: sorted[ceil(q*N) - 1]."""
    if not samples:
        raise ValueError("percentile of empty sample set")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    ordered = sorted(samples)
    return ordered[_nearest_rank(len(ordered), q) - 1]


def tail_percentile(samples: list, q: float):
    """Mirrored nearest-rank: the P-q value counting from the worst sample.

    For token-generation efficiency the interesting tail is the slow one, so
    tail_percentile(effs, 0.99) is the efficiency of the worst-1% boundary.
    """
    if not samples:
        raise ValueError("tail percentile of empty sample set")
    ordered = sorted(samples, reverse=True)
    return ordered[_nearest_rank(len(ordered), q) - 1]


@dataclass(frozen=True)
class EngineConfig:
    block: BlockSpec = field(default_factory=BlockSpec)
    gpu_pool: PoolConfig = field(default_factory=lambda: PoolConfig(total_blocks=512))
    cpu_pool_blocks: int = 491520  # 60 GiB of 128 KiB blocks
    transfer: TransferParams = field(default_factory=TransferParams)
    inference: InferParams = field(default_factory=InferParams)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    trace: PriorityTrace = field(default_factory=PriorityTrace)
    ablation: str = "full"
    sync_threshold_ratio: float = 0.5
    short_request_blocks: int = 16
    prealloc_min_blocks: int = 8
    prealloc_max_blocks: int = 256
    release_copy_on_swap_in: bool = False

    def __post_init__(self) -> None:
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"ablation must be one of {ABLATION_MODES}")
        if self.cpu_pool_blocks < 1:
            raise ValueError("cpu_pool_blocks must be >= 1")
        if not 0 < self.sync_threshold_ratio:
            raise ValueError("sync_threshold_ratio must be positive")

    @property
    def mode(self) -> AblationMode:
        return ablation_modes()[self.ablation]


@dataclass
class IterationRecord:
    index: int
    start: SimTime
    end: SimTime
    prefill_tokens: int
    decode_tokens: int
    stall_sync: SimTime
    stall_conflict: SimTime
    stall_yield: SimTime
    stall_recompute: SimTime
    tokens_emitted: int

    @property
    def stall_total(self) -> SimTime:
        return self.stall_sync + self.stall_conflict + self.stall_yield + self.stall_recompute


@dataclass
class MetricsReport:
    ttft_p95_us: int
    ttft_p99_us: int
    ttft_p999_us: int
    tbt_p999_us: int
    throughput_tokens_per_s: float
    overhead_ratio: float
    stall_sync_us: int
    stall_conflict_us: int
    stall_yield_us: int
    stall_recompute_us: int
    stall_total_us: int
    busy_time_us: int
    avg_granularity_blocks: float
    swap_out_blocks: int
    swap_out_ops: int
    swap_in_blocks: int
    swap_in_ops: int
    reused_blocks: int
    efficiency_p50: float
    efficiency_p90: float
    efficiency_p99: float
    efficiency_p999: float
    total_tokens: int
    expected_tokens: int
    iterations: int
    sim_end_us: int
    conversations: int
    turns_completed: int
    conflicts: int
    sync_stalls: int
    epochs: int
    peak_cpu_blocks: int
    granularity_histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["granularity_histogram"] = {
            str(k): v for k, v in sorted(self.granularity_histogram.items())
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for key, value in sorted(self.to_dict().items()):
            if key == "granularity_histogram":
                continue
            lines.append(f"{key},{value}")
        return "\n".join(lines) + "\n"


@dataclass
class RequestState:
    conv: Conversation
    phase: str = PENDING
    turn_idx: int = 0
    context_tokens: int = 0
    pending_input: int = 0
    remaining_output: int = 0
    turn_arrival: SimTime = 0
    turn_start_blocks: int = 0
    prev_token_at: Optional[SimTime] = None
    recompute_tokens: int = 0
    last_out_done: SimTime = 0

    @property
    def req(self) -> RequestId:
        return self.conv.id


class Engine:
    """One fully isolated simulation instance."""

    def __init__(self, config: EngineConfig, conversations: list[Conversation]) -> None:
        self.cfg = config
        self.mode = config.mode
        self.spec = config.block
        self.infer = config.inference
        self.conversations = sorted(conversations, key=lambda c: (c.arrival, c.id))
        for conv in self.conversations:
            need = blocks_needed(conv.total_tokens, self.spec)
            if need > config.gpu_pool.total_blocks:
                raise ValueError(
                    f"conversation {conv.id} needs {need} blocks "
                    f"({conv.total_tokens} tokens) but the GPU pool holds only "
                    f"{config.gpu_pool.total_blocks}; raise total_blocks or cap "
                    f"the workload's max_context_tokens"
                )
        self.pool = BlockGroupPool(config.gpu_pool)
        self.store = CpuStore(
            total_blocks=config.cpu_pool_blocks,
            reuse_enabled=self.mode.reuse,
            prealloc_min_blocks=config.prealloc_min_blocks,
            prealloc_max_blocks=config.prealloc_max_blocks,
            release_on_swap_in=config.release_copy_on_swap_in,
        )
        self.manager = SwapManager(
            config.transfer,
            split_ops_to_single_blocks=not self.mode.group_alloc,
            bytes_per_block=config.block.bytes_per_block,
        )
        self.qs = QueueState()
        self.states: dict[RequestId, RequestState] = {}
        self.ranks: dict[RequestId, int] = {}
        self.pool.rank_of = lambda req: self.ranks.get(req, 1 << 30)
        self._future: list[tuple[SimTime, RequestId]] = []
        self.records: list[IterationRecord] = []
        self.ttft_samples: list[SimTime] = []
        self.tbt_samples: list[SimTime] = []
        self.iteration = 0
        self.epoch = 0
        self.clock: SimTime = 0
        self.total_tokens = 0
        self.turns_completed = 0
        self.reused_blocks = 0
        self.conflict_count = 0
        self.sync_stall_count = 0
        self.iteration_log: Optional[list[dict]] = None
        self.check_invariants = False
        self._outs_ready_at: SimTime = 0

    # -- arrival plumbing ----------------------------------------------------------

    def _push_future(self, when: SimTime, req: RequestId) -> None:
        heapq.heappush(self._future, (when, req))

    def _inject_arrivals(self) -> None:
        while self._future and self._future[0][0] <= self.clock:
            when, req = heapq.heappop(self._future)
            self._begin_turn(req, when)

    def _begin_turn(self, req: RequestId, arrival: SimTime) -> None:
        st = self.states[req]
        tin, tout = st.conv.turns[st.turn_idx]
        st.phase = WAITING
        st.pending_input = tin
        st.remaining_output = tout
        st.turn_arrival = arrival
        st.prev_token_at = None
        st.turn_start_blocks = blocks_needed(st.context_tokens, self.spec)
        self.qs.move(req, "waiting")
        # Priorities come from the offline trace: an arrival mid-epoch slots
        # into the current order at a seeded position derived from the turn
        # itself, so a turn's priority luck does not depend on run dynamics.
        turn_rng = np.random.default_rng(
            np.random.SeedSequence([self.cfg.trace.seed, 0xE761, req, st.turn_idx])
        )
        insert_at = int(turn_rng.integers(0, len(self.ranks) + 1))
        for other, rank in self.ranks.items():
            if rank >= insert_at:
                self.ranks[other] = rank + 1
        self.ranks[req] = insert_at
        self.store.update_ranks(self.ranks)

    def _live_ids(self) -> list[RequestId]:
        return [r for r, st in self.states.items() if st.phase in LIVE_PHASES]

    # -- geometry helpers --------------------------------------------------------------

    def _footprint_blocks(self, st: RequestState) -> int:
        return blocks_needed(st.context_tokens, self.spec)

    def _gpu_extents(self, req: RequestId) -> list[tuple[int, int]]:
        """Owned groups merged along grant order; grant order is logical order."""
        extents: list[tuple[int, int]] = []
        for g in self.pool.owned_groups(req):
            if extents and extents[-1][0] + extents[-1][1] == g.start:
                extents[-1] = (extents[-1][0], extents[-1][1] + g.length)
            else:
                extents.append((g.start, g.length))
        return extents

    def _expected_blocks(self, st: RequestState) -> Optional[int]:
        if not self.mode.group_alloc:
            return None
        total = st.context_tokens + st.pending_input + st.remaining_output + 1
        return blocks_needed(total, self.spec)

    def _admission_want(self, st: RequestState) -> int:
        return max(
            1,
            blocks_needed(
                st.context_tokens + st.pending_input + min(1, st.remaining_output),
                self.spec,
            ),
        )

    def _admission_cost(self, st: RequestState) -> int:
        want = self._admission_want(st)
        expected = self._expected_blocks(st)
        if expected is None:
            return want
        return max(want, min(self.cfg.gpu_pool.initial_group_blocks, expected))

    # -- main loop ------------------------------------------------------------------------

    def run(self) -> MetricsReport:
        for conv in self.conversations:
            self.states[conv.id] = RequestState(conv=conv)
            self._push_future(conv.arrival, conv.id)

        stall_totals = {"sync": 0, "conflict": 0, "yield": 0, "recompute": 0}
        interval_tokens = 0
        interval_time = 0
        interval_peak_batch = 0
        intervals: list[tuple[int, float]] = []  # (peak batch, tokens/s)
        no_progress = 0
        first_arrival = self.conversations[0].arrival if self.conversations else 0

        while True:
            self._inject_arrivals()
            live = self._live_ids()
            if not live:
                if not self._future:
                    break
                self.clock = max(self.clock, self._future[0][0])
                continue

            self.iteration += 1
            progress = False

            # Step 1: collect finished async swap-ins.
            for flight in self.manager.pop_completed(self.clock):
                if flight.direction != "in":
                    continue
                st = self.states.get(flight.request)
                if st is not None and st.phase == SWAPPING_IN:
                    st.phase = RUNNING
                    self.qs.move(flight.request, "running")
                    progress = True

            # Priority epoch.
            period = self.cfg.trace.epoch_period
            if period and self.iteration % period == 0:
                self.epoch += 1
                live_now = self._live_ids()
                running_now = [r for r in live_now if self.states[r].phase in (RUNNING, SWAPPING_IN)]
                new_ranks = apply_priority_update(self.epoch, self.cfg.trace, live_now, running_now)
                self.ranks = new_ranks
                self.store.update_ranks(new_ranks)

            actions = self._schedule()
            grants: list[tuple[int, int]] = []

            self._outs_ready_at = self.clock
            for req in actions.swap_out:
                self._preempt(req)
                progress = True

            self._grow_decoders(grants)

            for req in actions.swap_in:
                progress = self._start_swap_in(req, grants) or progress
            for req in actions.admit:
                progress = self._admit(req, grants) or progress

            # Step 3.1: grants over still-executing transfers stall the engine.
            conflicts = self.manager.detect_conflicts(self.clock, grants)
            stall_conflict = self.manager.resolve_conflicts(self.clock, conflicts)
            self.conflict_count += len(conflicts)

            # Step 4: async/sync decision over the whole pending swap-in stream.
            pending = self.manager.pending_swap_ins()
            drain = max((elapsed(f.exec_done, self.clock) for f in pending), default=0)
            max_fp = max(
                (self._footprint_blocks(self.states[f.request]) for f in pending),
                default=0,
            )
            est = iteration_time(
                sum(self.states[r].pending_input for r in self.qs.running),
                len(self.qs.running),
                self.infer,
            )
            decision = decide_mode(
                drain,
                max_fp,
                est,
                self.cfg.sync_threshold_ratio,
                self.cfg.short_request_blocks,
                forced=None if self.mode.adaptive else "sync",
            )
            stall_sync = 0
            if decision.mode == "sync" and pending:
                stall_sync = drain
                self.sync_stall_count += 1
                for flight in pending:
                    self.manager.in_flight.remove(flight)
                    st = self.states.get(flight.request)
                    if st is not None and st.phase == SWAPPING_IN:
                        st.phase = RUNNING
                        self.qs.move(flight.request, "running")
                progress = True
            if not self.mode.adaptive:
                # Without the async swap manager the engine also waits out its
                # swap-outs before computing, as a stock serving loop does.
                out_drain = max(
                    (elapsed(f.exec_done, self.clock) for f in self.manager.in_flight),
                    default=0,
                )
                if out_drain > stall_sync:
                    if out_drain > 0 and stall_sync == 0:
                        self.sync_stall_count += 1
                    stall_sync = out_drain
                self.manager.pop_completed(self.clock + stall_sync)
            # The conflict wait overlaps the drain; charge only the excess.
            stall_sync = max(0, stall_sync - stall_conflict)

            # Assemble the batch. Recompute debt (dropped or contaminated KV)
            # re-enters through the prefill path of the request's next batch.
            recompute_tokens = 0
            prefillers = [
                r
                for r in self.qs.running
                if self.states[r].pending_input > 0 or self.states[r].recompute_tokens > 0
            ]
            prefill_set = set(prefillers)
            decoders = [
                r
                for r in self.qs.running
                if r not in prefill_set and self.states[r].remaining_output > 0
            ]
            prefill_tokens = 0
            for r in prefillers:
                st = self.states[r]
                prefill_tokens += st.pending_input + st.recompute_tokens
                recompute_tokens += st.recompute_tokens
                st.recompute_tokens = 0

            stall_yield = 0
            if prefillers or decoders:
                stall_yield = self.manager.yield_stall(self.clock)
            compute = iteration_time(prefill_tokens, len(decoders), self.infer)
            stall_recompute = recompute_tokens * self.infer.prefill_per_token
            duration = compute + stall_sync + stall_conflict + stall_yield
            end = self.clock + duration

            tokens_this_iter = self._emit_tokens(prefillers, decoders, end)
            progress = progress or tokens_this_iter > 0

            if self.check_invariants:
                self._assert_invariants(prefillers + decoders, end)

            stall_totals["sync"] += stall_sync
            stall_totals["conflict"] += stall_conflict
            stall_totals["yield"] += stall_yield
            stall_totals["recompute"] += stall_recompute
            record = IterationRecord(
                index=self.iteration,
                start=self.clock,
                end=end,
                prefill_tokens=prefill_tokens,
                decode_tokens=len(decoders),
                stall_sync=stall_sync,
                stall_conflict=stall_conflict,
                stall_yield=stall_yield,
                stall_recompute=stall_recompute,
                tokens_emitted=tokens_this_iter,
            )
            self.records.append(record)
            if self.iteration_log is not None:
                self.iteration_log.append(record.__dict__.copy())

            interval_tokens += tokens_this_iter
            interval_time += duration
            interval_peak_batch = max(interval_peak_batch, len(prefillers) + len(decoders))
            if self.iteration % EFFICIENCY_INTERVAL_ITERS == 0 and interval_time > 0:
                intervals.append(
                    (interval_peak_batch, interval_tokens * US_PER_S / interval_time)
                )
                interval_tokens = 0
                interval_time = 0
                interval_peak_batch = 0

            self.clock = end

            for req in list(self.qs.running):
                st = self.states[req]
                if st.remaining_output == 0 and st.pending_input == 0:
                    self._finish_turn(req)
                    progress = True

            no_progress = 0 if progress else no_progress + 1
            if no_progress >= DEADLOCK_ITERATIONS:
                raise DeadlockError(self._diagnostic_dump())

        # Ramp-up and drain intervals measure the workload's thin edges, not
        # the serving machinery; keep intervals at meaningful concurrency.
        # The threshold must not depend on the run's own dynamics, or modes
        # would qualify different interval populations.
        efficiencies = [0.0]
        if intervals:
            if self.cfg.scheduler.max_running is not None:
                threshold = max(2, self.cfg.scheduler.max_running // 2)
            else:
                batches = sorted(b for b, _ in intervals)
                threshold = max(2, batches[len(batches) // 2] // 2)
            qualified = [eff for b, eff in intervals if b >= threshold]
            if qualified:
                efficiencies = qualified
        return self._report(stall_totals, efficiencies, first_arrival)

    # -- scheduling ------------------------------------------------------------------------

    def _schedule(self):
        candidates = []
        for req in self._live_ids():
            st = self.states[req]
            rank = self.ranks.get(req, 1 << 30)
            if st.phase == RUNNING:
                cost = max(
                    self.pool.owned_blocks(req),
                    blocks_needed(st.context_tokens + 1, self.spec),
                )
                loc = "running"
            elif st.phase == SWAPPING_IN:
                cost = self.pool.owned_blocks(req)
                loc = "ongoing_swap_in"
            elif st.phase == SWAPPED:
                cost = blocks_needed(st.context_tokens + 1, self.spec)
                loc = "swapped"
            else:
                cost = self._admission_cost(st)
                loc = "waiting"
            candidates.append(
                Candidate(
                    request=req,
                    rank=rank,
                    location=loc,
                    cost_blocks=cost,
                    prefill_tokens=st.pending_input + st.recompute_tokens,
                )
            )
        return schedule(candidates, self.pool.total_blocks, self.cfg.scheduler)

    # -- preemption -------------------------------------------------------------------------

    def _preempt(self, req: RequestId) -> None:
        st = self.states[req]
        footprint = self._footprint_blocks(st)
        if self.cfg.scheduler.preemption_mode == "recompute":
            self._drop_for_recompute(st)
            return
        try:
            plan = self.store.plan_swap_out(req, footprint, self._gpu_extents(req))
        except CpuOutOfMemoryError:
            self._drop_for_recompute(st)
            return
        flight = self.manager.dispatch(self.clock, self.iteration, plan)
        st.last_out_done = flight.exec_done
        self._outs_ready_at = max(self._outs_ready_at, flight.exec_done)
        self.reused_blocks += plan.reused_blocks
        self._record_granularity(flight)
        self.manager.record_event(self.qs, self.manager.events_log[-1])
        self._reserve_next_increment(st, plan.moved_blocks)
        self.pool.free_request(req)
        st.phase = SWAPPED
        self.qs.move(req, "swapped")

    def _reserve_next_increment(self, st: RequestState, last_increment: int) -> None:
        """Reserve adjacent CPU space so the next swap-out extends contiguously."""
        if not self.mode.reuse:
            return
        estimate = max(
            self.cfg.prealloc_min_blocks,
            min(self.cfg.prealloc_max_blocks, last_increment),
        )
        self.store.preallocate_increment(st.req, estimate)

    def _drop_for_recompute(self, st: RequestState) -> None:
        """Timing-only preemption: KV is discarded and re-prefilled on resume."""
        self.pool.free_request(st.req)
        self.store.release(st.req)
        st.recompute_tokens = st.context_tokens
        st.phase = SWAPPED
        self.qs.move(st.req, "swapped")

    def _grow_decoders(self, grants: list[tuple[int, int]]) -> None:
        """Make room for this iteration's token per running decoder."""
        for req in sorted(self.qs.running, key=lambda r: (self.ranks.get(r, 1 << 30), r)):
            st = self.states[req]
            if st.remaining_output == 0 and st.pending_input == 0:
                continue
            need = blocks_needed(
                st.context_tokens + st.pending_input + min(1, st.remaining_output),
                self.spec,
            )
            owned = self.pool.owned_blocks(req)
            if need > owned:
                expected = self._expected_blocks(st)
                try:
                    res = self.pool.allocate(
                        req,
                        need - owned,
                        expected_total=None if expected is None else expected - owned,
                    )
                except OutOfMemoryError:
                    # No supply even after tail carving: classic vLLM preemption.
                    self._preempt(req)
                    continue
                grants.extend((g.start, g.length) for g in res.groups)
            # Marking the imminent blocks filled shields them from tail carving
            # by allocations later this iteration.
            self.pool.set_request_fill(req, need)

    # -- swap-in / admission -------------------------------------------------------------------

    def _allocate_gpu(self, st: RequestState) -> Optional[list[BlockGroup]]:
        want = self._admission_want(st)
        try:
            res = self.pool.allocate(st.req, want, expected_total=self._expected_blocks(st))
        except OutOfMemoryError:
            return None
        # The whole admission need (context, pending prefill, first token) is
        # spoken for; only the sized-up slack beyond it stays carvable.
        self.pool.set_request_fill(st.req, want)
        return res.groups

    def _start_swap_in(self, req: RequestId, grants: list[tuple[int, int]]) -> bool:
        """Bring a preempted request's KV back; False when GPU space fell through."""
        st = self.states[req]
        groups = self._allocate_gpu(st)
        if groups is None:
            return False
        self._dispatch_swap_in(st, [(g.start, g.length) for g in groups])
        return True

    def _admit(self, req: RequestId, grants: list[tuple[int, int]]) -> bool:
        st = self.states[req]
        groups = self._allocate_gpu(st)
        if groups is None:
            return False
        if st.context_tokens == 0 or st.recompute_tokens:
            # Fresh conversation, or resuming after a recompute-drop. These
            # compute immediately, so their grants are engine-conflict-checked.
            grants.extend((g.start, g.length) for g in groups)
            st.phase = RUNNING
            self.qs.move(req, "running")
            return True
        self._dispatch_swap_in(st, [(g.start, g.length) for g in groups])
        return True

    def _dispatch_swap_in(self, st: RequestState, my_extents: list[tuple[int, int]]) -> None:
        req = st.req
        try:
            plan = self.store.plan_swap_in(req, self._gpu_extents(req))
        except ContaminatedCopyError:
            # Reuse the valid prefix; the rest becomes recompute debt paid
            # through the prefill path when the request joins a batch.
            plan, prefix_blocks = self.store.plan_swap_in_prefix(req, self._gpu_extents(req))
            covered_tokens = prefix_blocks * self.spec.block_size_tokens
            st.recompute_tokens = max(0, st.context_tokens - covered_tokens)
        if not plan.ops:
            st.phase = RUNNING
            self.qs.move(req, "running")
            return
        # Grants over still-executing transfers synchronize fine-grained: the
        # incoming copy waits for the blocking op, never the whole engine.
        blockers = self.manager.detect_conflicts(self.clock, my_extents)
        dep = max((rec.exec_done for rec in blockers), default=0)
        self.conflict_count += len(blockers)
        # Stock two-phase swapping blocks on its swap-outs before issuing
        # swap-ins; only the adaptive swap manager overlaps the directions.
        not_before = max(st.last_out_done, dep)
        if not self.mode.adaptive:
            not_before = max(not_before, self._outs_ready_at)
        flight = self.manager.dispatch(
            self.clock, self.iteration, plan, not_before=not_before
        )
        self._record_granularity(flight)
        self.manager.record_event(self.qs, self.manager.events_log[-1])
        st.phase = SWAPPING_IN
        self.qs.move(req, "ongoing_swap_in")

    def _record_granularity(self, flight) -> None:
        for rec in flight.op_records:
            self.pool.record_transfer(rec.gpu_len)

    # -- emission & turn lifecycle ------------------------------------------------------------

    def _emit_one(self, st: RequestState, end: SimTime) -> None:
        st.context_tokens += 1
        st.remaining_output -= 1
        if st.prev_token_at is None:
            self.ttft_samples.append(elapsed(end, st.turn_arrival))
        else:
            self.tbt_samples.append(elapsed(end, st.prev_token_at))
        st.prev_token_at = end

    def _emit_tokens(self, prefillers: list[RequestId], decoders: list[RequestId], end: SimTime) -> int:
        emitted = 0
        for req in prefillers:
            st = self.states[req]
            st.context_tokens += st.pending_input
            st.pending_input = 0
            if st.remaining_output > 0:
                self._emit_one(st, end)
                emitted += 1
            self.pool.set_request_fill(
                req, min(self._footprint_blocks(st), self.pool.owned_blocks(req))
            )
        for req in decoders:
            st = self.states[req]
            self._emit_one(st, end)
            emitted += 1
            self.pool.set_request_fill(
                req, min(self._footprint_blocks(st), self.pool.owned_blocks(req))
            )
        self.total_tokens += emitted
        return emitted

    def _finish_turn(self, req: RequestId) -> None:
        st = self.states[req]
        st.turn_idx += 1
        self.turns_completed += 1
        if st.turn_idx >= len(st.conv.turns):
            self.pool.free_request(req)
            self.store.release(req)
            st.phase = DONE
            self.qs.remove(req)
            self.ranks.pop(req, None)
            return

        footprint = self._footprint_blocks(st)
        try:
            plan = self.store.plan_swap_out(req, footprint, self._gpu_extents(req))
            flight = self.manager.dispatch(self.clock, self.iteration, plan)
            st.last_out_done = flight.exec_done
            self.reused_blocks += plan.reused_blocks
            self._record_granularity(flight)
            self.manager.record_event(self.qs, self.manager.events_log[-1])
            self._reserve_next_increment(st, footprint - st.turn_start_blocks)
        except CpuOutOfMemoryError:
            self.store.release(req)
            st.recompute_tokens = st.context_tokens
        self.pool.free_request(req)
        st.phase = THINKING
        self.qs.remove(req)
        self.ranks.pop(req, None)
        self._push_future(self.clock + st.conv.think_time, req)

    def _assert_invariants(self, computing: list[RequestId], end: SimTime) -> None:
        """Debug mode: queue partition, pool partition, and conflict safety.

        Conflict safety: nothing computed this iteration over a GPU extent
        whose overlapping transfer is still executing past the iteration end.
        """
        self.qs.validate_partition(self._live_ids())
        self.pool.validate()
        for req in computing:
            for start, length in self._gpu_extents(req):
                for rec in self.manager.busy_extents:
                    overlap = start < rec.gpu_start + rec.gpu_len and rec.gpu_start < start + length
                    if overlap and rec.exec_done > end:
                        raise AssertionError(
                            f"request {req} computed over busy extent "
                            f"[{rec.gpu_start},{rec.gpu_start + rec.gpu_len}) "
                            f"finishing at {rec.exec_done} > {end}"
                        )

    # -- reporting ---------------------------------------------------------------------------------

    def _diagnostic_dump(self) -> str:
        lines = [
            f"deadlock at iteration {self.iteration}, clock {self.clock}",
            f"queues: waiting={self.qs.waiting} running={self.qs.running} "
            f"swapped={self.qs.swapped} ongoing={self.qs.ongoing_swap_in}",
            "gpu pool:",
            self.pool.dump(),
            "cpu pool:",
            self.store.dump(),
        ]
        return "\n".join(lines)

    def _report(
        self,
        stall_totals: dict[str, int],
        efficiencies: list[float],
        first_arrival: SimTime,
    ) -> MetricsReport:
        busy = sum(r.end - r.start for r in self.records)
        stall_total = sum(stall_totals.values())
        gran = self.pool.granularity_stats()
        avg_gran, hist = (gran if gran is not None else (0.0, {}))
        expected = sum(
            tout for conv in self.conversations for _, tout in conv.turns
        )
        span = max(1, self.clock - first_arrival)
        return MetricsReport(
            ttft_p95_us=percentile(self.ttft_samples, 0.95) if self.ttft_samples else 0,
            ttft_p99_us=percentile(self.ttft_samples, 0.99) if self.ttft_samples else 0,
            ttft_p999_us=percentile(self.ttft_samples, 0.999) if self.ttft_samples else 0,
            tbt_p999_us=percentile(self.tbt_samples, 0.999) if self.tbt_samples else 0,
            throughput_tokens_per_s=self.total_tokens * US_PER_S / span,
            overhead_ratio=stall_total / busy if busy else 0.0,
            stall_sync_us=stall_totals["sync"],
            stall_conflict_us=stall_totals["conflict"],
            stall_yield_us=stall_totals["yield"],
            stall_recompute_us=stall_totals["recompute"],
            stall_total_us=stall_total,
            busy_time_us=busy,
            avg_granularity_blocks=avg_gran,
            swap_out_blocks=self.manager.total_blocks["out"],
            swap_out_ops=self.manager.total_ops["out"],
            swap_in_blocks=self.manager.total_blocks["in"],
            swap_in_ops=self.manager.total_ops["in"],
            reused_blocks=self.reused_blocks,
            efficiency_p50=tail_percentile(efficiencies, 0.50),
            efficiency_p90=tail_percentile(efficiencies, 0.90),
            efficiency_p99=tail_percentile(efficiencies, 0.99),
            efficiency_p999=tail_percentile(efficiencies, 0.999),
            total_tokens=self.total_tokens,
            expected_tokens=expected,
            iterations=self.iteration,
            sim_end_us=self.clock,
            conversations=len(self.conversations),
            turns_completed=self.turns_completed,
            conflicts=self.conflict_count,
            sync_stalls=self.sync_stall_count,
            epochs=self.epoch,
            peak_cpu_blocks=self.store.peak_used_blocks,
            granularity_histogram=hist,
        )


def run(config: EngineConfig, conversations: list[Conversation]) -> MetricsReport:
    """Convenience wrapper: build an engine, run it, return the report."""
    return Engine(config, conversations).run()
