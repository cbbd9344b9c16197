"""Shared domain types: simulated time, block geometry, ids, priorities.

All simulated durations are integer microseconds so that replays are
bit-exact. Token counts convert to blocks with ceiling arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

# Simulated time in integer microseconds. Plain ints keep arithmetic cheap;
# helpers below guard the no-underflow invariant where subtraction happens.
SimTime = int

US_PER_S = 1_000_000

RequestId = int
TurnId = int
GroupId = int


def elapsed(later: SimTime, earlier: SimTime) -> SimTime:
    """Difference clamped at zero; simulated clocks never run backwards."""
    return later - earlier if later > earlier else 0


@dataclass(frozen=True)
class BlockSpec:
    """Geometry of one KV-cache block: tokens held and bytes moved per swap op."""

    block_size_tokens: int = 16
    bytes_per_block: int = 131072

    def __post_init__(self) -> None:
        if self.block_size_tokens < 1:
            raise ValueError(f"block_size_tokens must be >= 1, got {self.block_size_tokens}")
        if self.bytes_per_block < 1:
            raise ValueError(f"bytes_per_block must be >= 1, got {self.bytes_per_block}")


def blocks_needed(tokens: int, spec: BlockSpec) -> int:
    """Blocks required to hold `tokens` tokens (ceiling division)."""
    if tokens < 0:
        raise ValueError(f"tokens must be >= 0, got {tokens}")
    return -(-tokens // spec.block_size_tokens)


def group_bytes(num_blocks: int, spec: BlockSpec) -> int:
    """Bytes moved when transferring a run of `num_blocks` blocks."""
    if num_blocks < 0:
        raise ValueError(f"num_blocks must be >= 0, got {num_blocks}")
    return num_blocks * spec.bytes_per_block


@dataclass(frozen=True, order=True)
class Priority:
    """Total order over requests: lower rank wins, ties broken by request id."""

    rank: int
    request_id: RequestId


def priority_key(rank: int, request_id: RequestId) -> tuple[int, RequestId]:
    """Sort key for scheduling: ascending rank, then ascending request id."""
    return (rank, request_id)
