"""CPU-side swap space with cross-turn KV reuse and contamination tracking.

Each request's CPU copy is a list of segments covering its logical KV blocks
from block 0 upward. Higher-priority requests may claim a copy's space,
which contaminates (invalidates) whole segments; swap-out plans then move
only the blocks without a valid CPU image, and swap-in falls back to the
valid prefix when the copy is contaminated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .alloc import BlockGroupPool, OutOfMemoryError, PoolConfig, merge_adjacent
from .core import GroupId, RequestId


class CpuOutOfMemoryError(Exception):
    """CPU pool cannot host the increment even after evicting lower-priority copies."""


class ContaminatedCopyError(Exception):
    """A swap-in was requested for a copy with invalidated segments."""


class InsufficientVictimsError(Exception):
    """No combination of strictly-lower-priority segments covers the need."""


@dataclass
class Segment:
    """One stretch of a request's logical KV blocks backed by a CPU group."""

    block_lo: int
    block_hi: int
    group_id: Optional[GroupId]  # None once the backing space was taken
    valid: bool

    @property
    def length(self) -> int:
        return self.block_hi - self.block_lo


@dataclass
class CpuCopy:
    owner: RequestId
    segments: list[Segment] = field(default_factory=list)
    prealloc: Optional[GroupId] = None

    @property
    def covered_blocks(self) -> int:
        return self.segments[-1].block_hi if self.segments else 0

    @property
    def valid_blocks(self) -> int:
        return sum(s.length for s in self.segments if s.valid)

    @property
    def fully_valid(self) -> bool:
        return all(s.valid for s in self.segments)

    def valid_prefix_blocks(self) -> int:
        """Length of the unbroken valid run starting at block 0."""
        prefix = 0
        for seg in self.segments:
            if not seg.valid or seg.block_lo != prefix:
                break
            prefix = seg.block_hi
        return prefix


@dataclass(frozen=True)
class TransferOp:
    """One contiguous copy op; gpu/cpu extents are (start, blocks) pairs."""

    blocks: int
    gpu_start: int
    cpu_start: int


@dataclass
class SwapPlan:
    request: RequestId
    direction: str  # "out" | "in"
    ops: list[TransferOp]
    moved_blocks: int
    reused_blocks: int

    @property
    def op_count(self) -> int:
        return len(self.ops)


def _pair_extents(
    logical_ranges: list[tuple[int, int]],
    gpu_extents: list[tuple[int, int, int]],
    cpu_extents: list[tuple[int, int, int]],
) -> list[TransferOp]:
    """Zip logical block ranges onto physical extents on both sides.

    Extents are (logical_lo, logical_hi, physical_start); an op breaks
    wherever either side loses contiguity.
    """
    ops: list[TransferOp] = []
    for lo, hi in logical_ranges:
        pos = lo
        while pos < hi:
            gpu = next(e for e in gpu_extents if e[0] <= pos < e[1])
            cpu = next(e for e in cpu_extents if e[0] <= pos < e[1])
            end = min(hi, gpu[1], cpu[1])
            ops.append(
                TransferOp(
                    blocks=end - pos,
                    gpu_start=gpu[2] + (pos - gpu[0]),
                    cpu_start=cpu[2] + (pos - cpu[0]),
                )
            )
            pos = end
    return ops


class CpuStore:
    """Swap-space pool plus per-request copy bookkeeping."""

    def __init__(
        self,
        total_blocks: int,
        reuse_enabled: bool = True,
        prealloc_min_blocks: int = 8,
        prealloc_max_blocks: int = 256,
        release_on_swap_in: bool = False,
    ) -> None:
        self.pool = BlockGroupPool(PoolConfig(total_blocks=total_blocks, initial_group_blocks=1))
        self.reuse_enabled = reuse_enabled
        self.prealloc_min_blocks = prealloc_min_blocks
        self.prealloc_max_blocks = prealloc_max_blocks
        self.release_on_swap_in = release_on_swap_in
        self.copies: dict[RequestId, CpuCopy] = {}
        self.ranks: dict[RequestId, int] = {}
        self.peak_used_blocks = 0

    # -- priority bookkeeping ---------------------------------------------------

    def set_rank(self, req: RequestId, rank: int) -> None:
        self.ranks[req] = rank

    def update_ranks(self, ranks: dict[RequestId, int]) -> None:
        self.ranks.update(ranks)

    # -- helpers ------------------------------------------------------------------

    def copy_of(self, req: RequestId) -> Optional[CpuCopy]:
        return self.copies.get(req)

    def _note_usage(self) -> None:
        used = self.pool.used_blocks
        if used > self.peak_used_blocks:
            self.peak_used_blocks = used

    def _drop_prealloc(self, copy: CpuCopy) -> int:
        if copy.prealloc is None:
            return 0
        length = self.pool.group(copy.prealloc).length
        self.pool.free_group(copy.prealloc)
        copy.prealloc = None
        return length

    def _logical_extents(self, copy: CpuCopy) -> list[tuple[int, int, int]]:
        """Segment extents, merged where logical and physical runs both continue."""
        out: list[tuple[int, int, int]] = []
        for s in copy.segments:
            if s.group_id is None:
                continue
            start = self.pool.group(s.group_id).start
            if out and out[-1][1] == s.block_lo and out[-1][2] + (out[-1][1] - out[-1][0]) == start:
                out[-1] = (out[-1][0], s.block_hi, out[-1][2])
            else:
                out.append((s.block_lo, s.block_hi, start))
        return out

    @staticmethod
    def _gpu_logical_extents(
        gpu_extents: list[tuple[int, int]]
    ) -> list[tuple[int, int, int]]:
        out = []
        pos = 0
        for start, length in gpu_extents:
            out.append((pos, pos + length, start))
            pos += length
        return out

    def _ensure_free(self, req: RequestId, need: int) -> None:
        """Evict lower-priority copies until `need` blocks are free."""
        if self.pool.free_blocks >= need:
            return
        shortfall = need - self.pool.free_blocks
        try:
            self.evict_for(self.ranks.get(req, 0), shortfall)
        except InsufficientVictimsError as exc:
            raise CpuOutOfMemoryError(
                f"cannot host {need} blocks for request {req}"
            ) from exc
        if self.pool.free_blocks < need:
            raise CpuOutOfMemoryError(f"cannot host {need} blocks for request {req}")

    # -- operations -------------------------------------------------------------------

    def plan_swap_out(
        self,
        req: RequestId,
        gpu_footprint: int,
        gpu_extents: list[tuple[int, int]],
    ) -> SwapPlan:
        """Move exactly the blocks lacking a valid CPU image; reuse the rest.

        With reuse disabled every swap-out rewrites the full footprint.
        """
        copy = self.copies.setdefault(req, CpuCopy(owner=req))

        if not self.reuse_enabled:
            self._release_segments(copy)
            self._drop_prealloc(copy)

        reused = sum(
            s.length for s in copy.segments if s.valid and s.block_hi <= gpu_footprint
        )
        need_ranges = sorted(
            (s.block_lo, s.block_hi) for s in copy.segments if not s.valid
        )
        covered = copy.covered_blocks
        increment = gpu_footprint - covered
        if increment > 0:
            need_ranges.append((covered, gpu_footprint))
        moved = sum(hi - lo for lo, hi in need_ranges)

        # Destination space: the adjacent reservation absorbs the front of the
        # increment, fresh allocations cover contaminated holes and the rest.
        prealloc_span = 0
        if increment > 0 and copy.prealloc is not None:
            prealloc_span = min(self.pool.group(copy.prealloc).length, increment)
        try:
            self._ensure_free(req, moved - prealloc_span)
        except CpuOutOfMemoryError:
            if prealloc_span == 0:
                raise
            # Sacrifice the reservation before giving up entirely.
            self._drop_prealloc(copy)
            prealloc_span = 0
            self._ensure_free(req, moved)

        new_segments: list[Segment] = []
        for lo, hi in need_ranges:
            pos = lo
            if lo == covered and prealloc_span > 0:
                gid = copy.prealloc
                copy.prealloc = None
                # Trim reservation slack so the next one lands flush after the data.
                self.pool.shrink_group(gid, prealloc_span)
                new_segments.append(
                    Segment(block_lo=pos, block_hi=pos + prealloc_span, group_id=gid, valid=True)
                )
                pos += prealloc_span
            if pos < hi:
                res = self.pool.allocate(req, hi - pos, reclaim=False)
                for g in res.groups:
                    new_segments.append(
                        Segment(block_lo=pos, block_hi=pos + g.length, group_id=g.id, valid=True)
                    )
                    pos += g.length

        # Splice: retained valid segments + rewritten ones, ordered by range.
        kept = [s for s in copy.segments if s.valid]
        copy.segments = sorted(kept + new_segments, key=lambda s: s.block_lo)

        ops = _pair_extents(
            sorted(need_ranges),
            self._gpu_logical_extents(gpu_extents),
            [
                (s.block_lo, s.block_hi, self.pool.group(s.group_id).start)
                for s in new_segments
            ],
        )
        self._note_usage()
        plan = SwapPlan(request=req, direction="out", ops=ops, moved_blocks=moved, reused_blocks=reused)
        assert plan.moved_blocks + plan.reused_blocks == gpu_footprint
        return plan

    def plan_swap_in(
        self, req: RequestId, gpu_extents: list[tuple[int, int]]
    ) -> SwapPlan:
        """Restore the full copy to the GPU; contaminated copies are refused."""
        copy = self.copies.get(req)
        if copy is None or not copy.segments:
            raise ContaminatedCopyError(f"request {req} has no CPU copy")
        if not copy.fully_valid:
            raise ContaminatedCopyError(f"request {req} copy is contaminated")
        plan = self._plan_in_range(req, copy, copy.covered_blocks, gpu_extents)
        if self.release_on_swap_in:
            self.release(req)
        return plan

    def plan_swap_in_prefix(
        self, req: RequestId, gpu_extents: list[tuple[int, int]]
    ) -> tuple[SwapPlan, int]:
        """Swap in the valid prefix of a contaminated copy; drop the stale rest.

        Returns the plan and the prefix length in blocks; the caller owes a
        recompute of everything past the prefix.
        """
        copy = self.copies.get(req)
        if copy is None:
            return SwapPlan(req, "in", [], 0, 0), 0
        prefix = copy.valid_prefix_blocks()
        for seg in copy.segments:
            if seg.block_lo >= prefix and seg.group_id is not None:
                self.pool.free_group(seg.group_id)
        copy.segments = [s for s in copy.segments if s.block_hi <= prefix]
        self._drop_prealloc(copy)
        plan = self._plan_in_range(req, copy, prefix, gpu_extents)
        if self.release_on_swap_in:
            self.release(req)
        return plan, prefix

    def _plan_in_range(
        self,
        req: RequestId,
        copy: CpuCopy,
        blocks: int,
        gpu_extents: list[tuple[int, int]],
    ) -> SwapPlan:
        ops = _pair_extents(
            [(0, blocks)] if blocks else [],
            self._gpu_logical_extents(gpu_extents),
            self._logical_extents(copy),
        )
        return SwapPlan(request=req, direction="in", ops=ops, moved_blocks=blocks, reused_blocks=0)

    def evict_for(self, rank: int, need_blocks: int) -> list[tuple[RequestId, GroupId]]:
        """Free `need_blocks` by contaminating strictly-lower-priority copies.

        Reservations go first (they hold no data), then segments, lowest
        priority first and largest segment first within one victim.
        """
        if need_blocks < 0:
            raise ValueError("need_blocks must be >= 0")
        if need_blocks == 0:
            return []

        victims = [
            copy
            for req, copy in self.copies.items()
            if self.ranks.get(req, 0) > rank
        ]
        # Lowest priority first (largest rank), stable by request id.
        victims.sort(key=lambda c: (-self.ranks.get(c.owner, 0), c.owner))

        freed = 0
        invalidated: list[tuple[RequestId, GroupId]] = []
        for copy in victims:
            if freed >= need_blocks:
                break
            freed += self._drop_prealloc(copy)
        for copy in victims:
            if freed >= need_blocks:
                break
            segments = sorted(
                (s for s in copy.segments if s.valid and s.group_id is not None),
                key=lambda s: (-s.length, s.block_lo),
            )
            for seg in segments:
                if freed >= need_blocks:
                    break
                gid = seg.group_id
                freed += seg.length
                self.pool.free_group(gid)
                seg.group_id = None
                seg.valid = False
                invalidated.append((copy.owner, gid))

        if freed < need_blocks:
            raise InsufficientVictimsError(
                f"only {freed} of {need_blocks} blocks evictable below rank {rank}"
            )
        return invalidated

    def preallocate_increment(self, req: RequestId, expected_increment: int) -> bool:
        """Best-effort reservation adjacent to the copy's last segment."""
        if expected_increment == 0:
            return True
        copy = self.copies.get(req)
        if copy is None or not copy.segments or not copy.fully_valid:
            return False
        if copy.prealloc is not None:
            return True
        last = copy.segments[-1]
        tail_start = self.pool.group(last.group_id).end
        granted = self.pool.allocate_at(req, tail_start, expected_increment)
        if granted is None:
            return False
        copy.prealloc = granted.id
        self._note_usage()
        return True

    def release(self, req: RequestId) -> None:
        """Drop a request's copy entirely, returning all space to the pool."""
        copy = self.copies.pop(req, None)
        if copy is None:
            return
        self._release_segments(copy)
        self._drop_prealloc(copy)
        self.ranks.pop(req, None)

    def _release_segments(self, copy: CpuCopy) -> None:
        for seg in copy.segments:
            if seg.group_id is not None:
                self.pool.free_group(seg.group_id)
        copy.segments = []

    def dump(self) -> str:
        """Pool layout in the allocator's debug format, prefixed `cpu`."""
        return "\n".join(f"cpu {line}" for line in self.pool.dump().splitlines())
