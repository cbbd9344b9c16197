"""Synthetic multi-turn conversation workloads, plus JSONL trace ingest/export.

Arrivals follow a Poisson process; turn counts are shifted-geometric; input
and output lengths are lognormal with a hard cap. Everything is reproducible
from a single seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import US_PER_S, RequestId, SimTime

_SEED_LABEL = 0x1AB0  # workload stream label under the run's root seed


@dataclass(frozen=True)
class LengthDist:
    """Lognormal token-length distribution, capped and floored at one token."""

    median: float
    sigma: float
    max_tokens: int

    def __post_init__(self) -> None:
        if self.median <= 0:
            raise ValueError("median must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    def sample(self, rng: np.random.Generator) -> int:
        tokens = int(round(rng.lognormal(mean=math.log(self.median), sigma=self.sigma)))
        return max(1, min(tokens, self.max_tokens))


@dataclass(frozen=True)
class WorkloadConfig:
    num_conversations: int = 200
    arrival_rate_per_s: float = 1.0
    mean_turns: float = 5.5
    input_tokens: LengthDist = field(default_factory=lambda: LengthDist(96.0, 0.9, 1024))
    output_tokens: LengthDist = field(default_factory=lambda: LengthDist(112.0, 0.7, 512))
    think_time_mean_s: float = 10.0
    max_context_tokens: Optional[int] = None  # context window; truncates turn lists
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_conversations < 1:
            raise ValueError("num_conversations must be >= 1")
        if self.arrival_rate_per_s <= 0:
            raise ValueError("arrival_rate_per_s must be positive")
        if self.mean_turns < 1:
            raise ValueError("mean_turns must be >= 1")
        if self.think_time_mean_s < 0:
            raise ValueError("think_time_mean_s must be nonnegative")
        if (
            self.max_context_tokens is not None
            and self.max_context_tokens
            < self.input_tokens.max_tokens + self.output_tokens.max_tokens
        ):
            raise ValueError("max_context_tokens must cover at least one maximal turn")


@dataclass
class Conversation:
    """One multi-turn participant: per-turn token counts plus arrival timing."""

    id: RequestId
    turns: list[tuple[int, int]]  # (input_tokens, output_tokens)
    arrival: SimTime
    think_time: SimTime  # gap between a turn finishing and the next arriving

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError(f"conversation {self.id} has no turns")
        for i, (tin, tout) in enumerate(self.turns):
            if tin < 1 or tout < 1:
                raise ValueError(
                    f"conversation {self.id} turn {i} has nonpositive token counts"
                )
        if self.arrival < 0 or self.think_time < 0:
            raise ValueError(f"conversation {self.id} has negative timing")

    @property
    def total_tokens(self) -> int:
        return sum(tin + tout for tin, tout in self.turns)


def generate(cfg: WorkloadConfig) -> list[Conversation]:
    """Draw a full conversation trace; deterministic under cfg.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SEED_LABEL]))
    mean_gap_us = US_PER_S / cfg.arrival_rate_per_s

    conversations = []
    clock = 0.0
    for cid in range(cfg.num_conversations):
        clock += rng.exponential(mean_gap_us)
        n_turns = int(rng.geometric(1.0 / cfg.mean_turns))
        turns = []
        total = 0
        for _ in range(n_turns):
            tin = cfg.input_tokens.sample(rng)
            tout = cfg.output_tokens.sample(rng)
            if (
                turns
                and cfg.max_context_tokens is not None
                and total + tin + tout > cfg.max_context_tokens
            ):
                break  # conversation hit the context window
            turns.append((tin, tout))
            total += tin + tout
        think = int(rng.exponential(cfg.think_time_mean_s * US_PER_S))
        conversations.append(
            Conversation(id=cid, turns=turns, arrival=int(clock), think_time=think)
        )
    return conversations


def write_trace(conversations: list[Conversation], path: str | Path) -> None:
    """JSONL export: one conversation per line."""
    with open(path, "w", encoding="utf-8") as f:
        for conv in conversations:
            record = {
                "id": conv.id,
                "arrival_us": conv.arrival,
                "turns": [{"in": tin, "out": tout} for tin, tout in conv.turns],
                "think_us": conv.think_time,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def ingest(path: str | Path) -> list[Conversation]:
    """Parse a JSONL trace; malformed lines fail with their line number."""
    conversations = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                turns = [(int(t["in"]), int(t["out"])) for t in record["turns"]]
                conv = Conversation(
                    id=int(record["id"]),
                    turns=turns,
                    arrival=int(record["arrival_us"]),
                    think_time=int(record["think_us"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}: bad trace record at line {lineno}: {exc}") from exc
            conversations.append(conv)
    return conversations
