"""Priority scheduling: offline trace-driven rank assignment and greedy
queue repair under GPU memory pressure.

Ranks are reassigned for all live requests at fixed epochs; between epochs
the most recent assignment holds. The scheduler then fills the running set
with the highest-priority requests that fit, preempting the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import RequestId

_SEED_LABEL = 0x5C3D  # priority-trace stream label under the run's root seed

PATTERNS = ("markov", "random")


@dataclass(frozen=True)
class PriorityTrace:
    pattern: str = "markov"
    frequency: float = 0.02  # priority updates per iteration
    seed: int = 0
    p_keep: float = 0.8  # markov: chance a running request stays near the top

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.frequency < 0:
            raise ValueError("frequency must be nonnegative")
        if not 0.0 <= self.p_keep <= 1.0:
            raise ValueError("p_keep must be in [0, 1]")

    @property
    def epoch_period(self) -> int:
        """Iterations between updates; 0 means priorities never change."""
        if self.frequency == 0:
            return 0
        return max(1, round(1.0 / self.frequency))


def apply_priority_update(
    epoch: int,
    trace: PriorityTrace,
    live: Iterable[RequestId],
    running: Iterable[RequestId],
) -> dict[RequestId, int]:
    """Fresh total order over live requests for one update epoch.

    random: a seeded permutation of ranks. markov: running requests keep a
    rank within the top |running| with probability p_keep, modeling temporal
    locality; everyone else is permuted over the leftover ranks.
    """
    ids = sorted(live)
    n = len(ids)
    if n == 0:
        return {}
    rng = np.random.default_rng(np.random.SeedSequence([trace.seed, _SEED_LABEL, epoch]))

    if trace.pattern == "random":
        perm = rng.permutation(n)
        return {ids[i]: int(perm[i]) for i in range(n)}

    running_ids = sorted(set(running) & set(ids))
    k = len(running_ids)
    # Keep-coins derive from (epoch, request) so a request's retention luck
    # is reproducible regardless of who else happens to be live.
    keepers = [
        r
        for r in running_ids
        if np.random.default_rng(
            np.random.SeedSequence([trace.seed, _SEED_LABEL, epoch, 1, r])
        ).random()
        < trace.p_keep
    ]
    top_ranks = rng.choice(k, size=len(keepers), replace=False) if keepers else []
    ranks: dict[RequestId, int] = {
        req: int(rank) for req, rank in zip(keepers, top_ranks)
    }
    rest_ids = [r for r in ids if r not in ranks]
    rest_ranks = sorted(set(range(n)) - set(ranks.values()))
    order = rng.permutation(len(rest_ids))
    for slot, req_idx in enumerate(order):
        ranks[rest_ids[int(req_idx)]] = rest_ranks[slot]
    return ranks


def dump_assignment(epoch: int, ranks: dict[RequestId, int]) -> str:
    """JSONL lines {epoch, request_id, rank} for replayable trace export."""
    return "\n".join(
        json.dumps({"epoch": epoch, "request_id": req, "rank": rank})
        for req, rank in sorted(ranks.items())
    )


@dataclass(frozen=True)
class SchedulerConfig:
    max_running: int | None = None
    preemption_mode: str = "swap"  # "swap" | "recompute"
    max_prefill_tokens: int | None = None  # admission budget per iteration

    def __post_init__(self) -> None:
        if self.max_running is not None and self.max_running < 1:
            raise ValueError("max_running must be >= 1 when set")
        if self.preemption_mode not in ("swap", "recompute"):
            raise ValueError(f"unknown preemption_mode {self.preemption_mode!r}")
        if self.max_prefill_tokens is not None and self.max_prefill_tokens < 1:
            raise ValueError("max_prefill_tokens must be >= 1 when set")


@dataclass(frozen=True)
class Candidate:
    """One schedulable request: where it sits and what admitting it costs."""

    request: RequestId
    rank: int
    location: str  # "running" | "swapped" | "waiting" | "ongoing_swap_in"
    cost_blocks: int
    prefill_tokens: int = 0


@dataclass
class SchedulingActions:
    admit: list[RequestId] = field(default_factory=list)  # waiting -> running
    swap_in: list[RequestId] = field(default_factory=list)  # swapped -> running
    swap_out: list[RequestId] = field(default_factory=list)  # running -> swapped


def schedule(
    candidates: Sequence[Candidate],
    capacity_blocks: int,
    config: SchedulerConfig,
) -> SchedulingActions:
    """Greedy admission by rank: best-ranked requests fill the running set.

    Requests mid swap-in are committed (charged, never preempted); displaced
    running requests become swap-out actions. A request that does not fit is
    skipped, not blocking lower-ranked requests that do fit.
    """
    # Requests mid swap-in hold memory but no compute slot: they are not in
    # the batch until their transfer lands.
    slots = config.max_running if config.max_running is not None else len(candidates)
    capacity = capacity_blocks
    for c in candidates:
        if c.location == "ongoing_swap_in":
            capacity -= c.cost_blocks

    actions = SchedulingActions()
    selected: set[RequestId] = set()
    prefill_budget = config.max_prefill_tokens
    for c in sorted(candidates, key=lambda c: (c.rank, c.request)):
        if c.location == "ongoing_swap_in":
            continue
        if slots <= 0:
            continue
        if c.cost_blocks > capacity:
            continue
        if (
            c.location == "waiting"
            and prefill_budget is not None
            and c.prefill_tokens > prefill_budget
        ):
            continue
        selected.add(c.request)
        capacity -= c.cost_blocks
        slots -= 1
        if c.location == "waiting" and prefill_budget is not None:
            prefill_budget -= c.prefill_tokens

    for c in sorted(candidates, key=lambda c: (c.rank, c.request)):
        if c.location == "running" and c.request not in selected:
            actions.swap_out.append(c.request)
        elif c.location == "swapped" and c.request in selected:
            actions.swap_in.append(c.request)
        elif c.location == "waiting" and c.request in selected:
            actions.admit.append(c.request)
    return actions
