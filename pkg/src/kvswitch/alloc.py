"""I/O-aware block-group allocator over a preallocated pool of KV-cache blocks.

Blocks are managed as contiguous runs (block groups) so that swap traffic
moves few large extents instead of many single blocks. The pool keeps a
free-side and a used-side view; free neighbors coalesce eagerly, and the
unused tail of another request's active group can be carved when the free
side runs dry.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .core import GroupId, RequestId


class PoolError(Exception):
    """Base error for block pool misuse or exhaustion."""


class OutOfMemoryError(PoolError):
    """Free space plus carvable victim tails cannot cover the request."""


class NoVictimError(PoolError):
    """No active group has a large enough unused tail to carve."""


@dataclass
class BlockGroup:
    """A contiguous run of blocks: the allocation and transfer unit."""

    id: GroupId
    start: int
    length: int
    free: bool
    owner: Optional[RequestId] = None
    active: bool = False
    filled: int = 0  # owner-data blocks, always a prefix of the run

    @property
    def end(self) -> int:
        return self.start + self.length

    @property
    def unused_tail(self) -> int:
        return self.length - self.filled


@dataclass(frozen=True)
class PoolConfig:
    total_blocks: int
    initial_group_blocks: int = 60
    rng_seed: int = 0
    victim_policy: str = "random"  # "random" | "lowest_priority"

    def __post_init__(self) -> None:
        if self.total_blocks < 1:
            raise ValueError(f"total_blocks must be >= 1, got {self.total_blocks}")
        if self.initial_group_blocks < 1:
            raise ValueError(
                f"initial_group_blocks must be >= 1, got {self.initial_group_blocks}"
            )
        if self.total_blocks < self.initial_group_blocks:
            raise ValueError("total_blocks must be >= initial_group_blocks")
        if self.victim_policy not in ("random", "lowest_priority"):
            raise ValueError(f"unknown victim_policy {self.victim_policy!r}")


@dataclass
class AllocResult:
    """Groups granted for one request, plus any victims whose tails were carved."""

    groups: list[BlockGroup]
    reclaimed_from: list[tuple[RequestId, GroupId]] = field(default_factory=list)

    @property
    def total_blocks(self) -> int:
        return sum(g.length for g in self.groups)


# Partial carves leave the victim this much slack past its filled prefix so
# its next token does not immediately trigger a fresh allocation.
VICTIM_HEADROOM_BLOCKS = 8


class BlockGroupPool:
    """Free/used block-group bookkeeping with split, merge, and tail reclaim.

    The pool is always an exact partition: every block belongs to exactly one
    group, and no two free groups are ever adjacent.
    """

    def __init__(self, config: PoolConfig) -> None:
        self.config = config
        self.total_blocks = config.total_blocks
        self._rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 0x6A11]))
        self._next_id: GroupId = 0
        self._groups: dict[GroupId, BlockGroup] = {}
        self._by_start: dict[int, GroupId] = {}
        self._by_end: dict[int, GroupId] = {}
        self._free_ids: set[GroupId] = set()
        self._owned: dict[RequestId, list[GroupId]] = {}
        self._active: dict[RequestId, GroupId] = {}
        self._free_total = config.total_blocks
        self._transfer_sizes: Counter[int] = Counter()
        self._transfer_count = 0
        self._transfer_blocks = 0
        self.rank_of: Optional[Callable[[RequestId], int]] = None

        root = self._new_group(0, config.total_blocks, free=True)
        self._register(root)

    # -- internal bookkeeping -------------------------------------------------

    def _new_group(self, start: int, length: int, free: bool) -> BlockGroup:
        g = BlockGroup(id=self._next_id, start=start, length=length, free=free)
        self._next_id += 1
        return g

    def _register(self, g: BlockGroup) -> None:
        self._groups[g.id] = g
        self._by_start[g.start] = g.id
        self._by_end[g.end] = g.id
        if g.free:
            self._free_ids.add(g.id)

    def _unregister(self, g: BlockGroup) -> None:
        del self._groups[g.id]
        del self._by_start[g.start]
        del self._by_end[g.end]
        self._free_ids.discard(g.id)

    def _neighbor_left(self, g: BlockGroup) -> Optional[BlockGroup]:
        gid = self._by_end.get(g.start)
        return self._groups[gid] if gid is not None else None

    def _neighbor_right(self, g: BlockGroup) -> Optional[BlockGroup]:
        gid = self._by_start.get(g.end)
        return self._groups[gid] if gid is not None else None

    def _split_free_prefix(self, g: BlockGroup, take: int) -> BlockGroup:
        """Carve `take` blocks off the low end of a free group; remainder keeps its id."""
        assert g.free and 1 <= take <= g.length
        if take == g.length:
            self._unregister(g)
            self._free_total -= take
            g.free = False
            return g
        granted = self._new_group(g.start, take, free=False)
        del self._by_start[g.start]
        g.start += take
        g.length -= take
        self._by_start[g.start] = g.id
        self._free_total -= take
        return granted

    def _attach(self, g: BlockGroup, owner: RequestId) -> None:
        g.free = False
        g.owner = owner
        g.active = False
        g.filled = 0
        self._register(g)
        self._owned.setdefault(owner, []).append(g.id)

    def _set_active(self, owner: RequestId, gid: GroupId) -> None:
        prev = self._active.get(owner)
        if prev is not None and prev in self._groups:
            self._groups[prev].active = False
        self._groups[gid].active = True
        self._active[owner] = gid

    # -- queries ---------------------------------------------------------------

    @property
    def free_blocks(self) -> int:
        return self._free_total

    @property
    def used_blocks(self) -> int:
        return self.total_blocks - self._free_total

    def group(self, gid: GroupId) -> BlockGroup:
        return self._groups[gid]

    def owned_groups(self, req: RequestId) -> list[BlockGroup]:
        return [self._groups[g] for g in self._owned.get(req, ())]

    def owned_blocks(self, req: RequestId) -> int:
        return sum(self._groups[g].length for g in self._owned.get(req, ()))

    def free_groups(self) -> list[BlockGroup]:
        return sorted((self._groups[g] for g in self._free_ids), key=lambda g: g.start)

    def _carvable(self, g: BlockGroup) -> int:
        return max(0, g.unused_tail - min(VICTIM_HEADROOM_BLOCKS, g.unused_tail))

    def _victim_groups(self, exclude: Optional[RequestId]) -> list[BlockGroup]:
        out = []
        for owner, gid in self._active.items():
            if owner == exclude:
                continue
            g = self._groups[gid]
            if g.unused_tail >= 1:
                out.append(g)
        out.sort(key=lambda g: (g.owner, g.id))
        return out

    def reclaimable_blocks(self, exclude: Optional[RequestId] = None) -> int:
        return sum(g.unused_tail for g in self._victim_groups(exclude))

    # -- operations --------------------------------------------------------------

    def allocate(
        self,
        req: RequestId,
        want_blocks: int,
        expected_total: Optional[int] = None,
        reclaim: bool = True,
    ) -> AllocResult:
        """Grant `want_blocks` (or a sized-up first group) as few groups as possible.

        Free groups are consumed first (best fit, then largest first); when
        they run dry and `reclaim` is set, unused tails of other requests'
        active groups are carved. Raises OutOfMemoryError when even full
        tail-stripping cannot cover the immediate need, leaving the pool
        untouched.
        """
        if want_blocks < 1:
            raise ValueError(f"want_blocks must be >= 1, got {want_blocks}")

        supply = self._free_total
        if reclaim:
            supply += self.reclaimable_blocks(exclude=req)
        if supply < want_blocks:
            raise OutOfMemoryError(
                f"need {want_blocks} blocks, supply {supply} "
                f"(free {self._free_total})"
            )

        # Requests smaller than the configured first-group size get a group
        # sized by their anticipated footprint. The sized-up headroom only
        # consumes free space; victim tails are carved for the want alone.
        target = want_blocks
        if expected_total is not None and want_blocks < self.config.initial_group_blocks:
            target = min(self.config.initial_group_blocks, max(want_blocks, expected_total))
        target = max(want_blocks, min(target, self._free_total))

        granted: list[BlockGroup] = []
        reclaimed: list[tuple[RequestId, GroupId]] = []
        remaining = target
        while remaining > 0:
            fit = None
            for gid in self._free_ids:
                g = self._groups[gid]
                if g.length >= remaining and (
                    fit is None
                    or g.length < fit.length
                    or (g.length == fit.length and g.start < fit.start)
                ):
                    fit = g
            if fit is not None:
                piece = self._split_free_prefix(fit, remaining)
                self._attach(piece, req)
                granted.append(piece)
                remaining = 0
                break
            if self._free_ids:
                largest = max(
                    (self._groups[g] for g in self._free_ids),
                    key=lambda g: (g.length, -g.start),
                )
                take = largest.length
                piece = self._split_free_prefix(largest, take)
                self._attach(piece, req)
                granted.append(piece)
                remaining -= take
                continue

            if not reclaim:
                raise OutOfMemoryError("free supply changed mid-allocation")
            victims = self._victim_groups(exclude=req)
            exact = [g for g in victims if g.unused_tail >= remaining]
            if exact:
                victim = self._pick_victim(exact)
                take = remaining
            else:
                partial = [g for g in victims if self._carvable(g) >= 1]
                if partial:
                    victim = max(partial, key=lambda g: (self._carvable(g), -g.id))
                    take = min(self._carvable(victim), remaining)
                else:
                    # Headroom is best-effort: strip whole tails rather than fail.
                    strippable = [g for g in victims if g.unused_tail >= 1]
                    if not strippable:
                        raise OutOfMemoryError("victim supply changed mid-allocation")
                    victim = max(strippable, key=lambda g: (g.unused_tail, -g.id))
                    take = min(victim.unused_tail, remaining)
            reclaimed.append((victim.owner, victim.id))
            granted.append(self._carve_tail(victim, take, req))
            remaining -= take

        self._set_active(req, granted[-1].id)
        return AllocResult(groups=granted, reclaimed_from=reclaimed)

    def _pick_victim(self, candidates: list[BlockGroup]) -> BlockGroup:
        candidates = sorted(candidates, key=lambda g: (g.owner, g.id))
        if self.config.victim_policy == "lowest_priority" and self.rank_of is not None:
            return max(candidates, key=lambda g: (self.rank_of(g.owner), g.owner))
        idx = int(self._rng.integers(len(candidates)))
        return candidates[idx]

    def _carve_tail(self, victim: BlockGroup, take: int, new_owner: RequestId) -> BlockGroup:
        """Split `take` blocks off the high end of a used group; victim keeps its prefix."""
        assert not victim.free and 1 <= take <= victim.unused_tail
        if take == victim.length:
            # Nothing of the victim's data lives here: the group changes hands
            # whole, under a fresh id so grants never resurface an old one.
            owner = victim.owner
            self._owned[owner].remove(victim.id)
            was_active = victim.active
            self._unregister(victim)
            victim.id = self._next_id
            self._next_id += 1
            victim.active = False
            victim.owner = new_owner
            self._register(victim)
            self._owned.setdefault(new_owner, []).append(victim.id)
            remaining = self._owned.get(owner, [])
            if not remaining:
                self._owned.pop(owner, None)
                self._active.pop(owner, None)
            elif was_active:
                self._set_active(owner, remaining[-1])
            return victim
        del self._by_end[victim.end]
        victim.length -= take
        self._by_end[victim.end] = victim.id
        piece = self._new_group(victim.end, take, free=False)
        self._attach(piece, new_owner)
        return piece

    def reclaim_from_victim(
        self, need_blocks: int, *, for_request: RequestId
    ) -> tuple[RequestId, BlockGroup]:
        """Carve exactly `need_blocks` off one eligible victim's active-group tail."""
        if need_blocks < 1:
            raise ValueError(f"need_blocks must be >= 1, got {need_blocks}")
        victims = [
            g for g in self._victim_groups(exclude=for_request) if g.unused_tail >= need_blocks
        ]
        if not victims:
            raise NoVictimError(f"no active group has {need_blocks} unused tail blocks")
        victim = self._pick_victim(victims)
        owner = victim.owner
        piece = self._carve_tail(victim, need_blocks, for_request)
        self._set_active(for_request, piece.id)
        return owner, piece

    def allocate_at(self, req: RequestId, start: int, length: int) -> Optional[BlockGroup]:
        """Grant the exact extent [start, start+length) if it is currently free."""
        if length == 0:
            return None
        for gid in self._free_ids:
            g = self._groups[gid]
            if g.start <= start and g.end >= start + length:
                if g.start < start:
                    left = self._new_group(g.start, start - g.start, free=True)
                    del self._by_start[g.start]
                    g.start = start
                    g.length -= left.length
                    self._by_start[g.start] = g.id
                    self._register(left)
                piece = self._split_free_prefix(g, length)
                self._attach(piece, req)
                self._set_active(req, piece.id)
                return piece
        return None

    def free_group(self, gid: GroupId) -> None:
        """Return a used group to the free side, coalescing with free neighbors."""
        g = self._groups.get(gid)
        if g is None or g.free:
            raise PoolError(f"group {gid} is not allocated (double free?)")
        owner = g.owner
        self._owned[owner].remove(gid)
        was_active = g.active
        g.free = True
        g.owner = None
        g.active = False
        g.filled = 0
        self._free_ids.add(gid)
        self._free_total += g.length

        left = self._neighbor_left(g)
        if left is not None and left.free:
            self._unregister(g)
            del self._by_end[left.end]
            left.length += g.length
            self._by_end[left.end] = left.id
            g = left
        right = self._neighbor_right(g)
        if right is not None and right.free:
            self._unregister(right)
            del self._by_end[g.end]
            g.length += right.length
            self._by_end[g.end] = g.id

        remaining = self._owned.get(owner, [])
        if not remaining:
            self._owned.pop(owner, None)
            self._active.pop(owner, None)
        elif was_active:
            self._set_active(owner, remaining[-1])

    def shrink_group(self, gid: GroupId, new_length: int) -> None:
        """Give a used group's tail back to the free side."""
        g = self._groups[gid]
        if g.free:
            raise PoolError(f"group {gid} is free")
        if not 1 <= new_length <= g.length:
            raise ValueError(f"bad shrink target {new_length} for length {g.length}")
        if new_length == g.length:
            return
        tail_len = g.length - new_length
        del self._by_end[g.end]
        g.length = new_length
        g.filled = min(g.filled, new_length)
        self._by_end[g.end] = gid
        tail = self._new_group(g.end, tail_len, free=True)
        self._register(tail)
        self._free_total += tail_len
        right = self._neighbor_right(tail)
        if right is not None and right.free:
            self._unregister(right)
            del self._by_end[tail.end]
            tail.length += right.length
            self._by_end[tail.end] = tail.id

    def free_request(self, req: RequestId) -> int:
        """Release every group a request owns; returns blocks freed."""
        freed = 0
        for gid in list(self._owned.get(req, ())):
            freed += self._groups[gid].length
            self.free_group(gid)
        return freed

    def set_request_fill(self, req: RequestId, filled_blocks: int) -> None:
        """Distribute a request's data blocks over its groups in grant order."""
        remaining = filled_blocks
        for gid in self._owned.get(req, ()):
            g = self._groups[gid]
            g.filled = min(g.length, remaining)
            remaining -= g.filled
        if remaining > 0:
            raise PoolError(
                f"request {req} holds fewer blocks than fill level {filled_blocks}"
            )

    # -- transfer granularity ------------------------------------------------------

    def record_transfer(self, blocks: int) -> None:
        self._transfer_sizes[blocks] += 1
        self._transfer_count += 1
        self._transfer_blocks += blocks

    def granularity_stats(self) -> Optional[tuple[float, dict[int, int]]]:
        """Mean blocks per recorded transfer op and the size histogram.

        Returns None until at least one transfer has been recorded.
        """
        if self._transfer_count == 0:
            return None
        return self._transfer_blocks / self._transfer_count, dict(self._transfer_sizes)

    # -- debugging ---------------------------------------------------------------

    def dump(self) -> str:
        """One group per line: `start len state owner active`, by address."""
        lines = []
        for g in sorted(self._groups.values(), key=lambda g: g.start):
            state = "free" if g.free else "used"
            owner = "-" if g.owner is None else str(g.owner)
            active = "1" if g.active else "0"
            lines.append(f"{g.start} {g.length} {state} {owner} {active}")
        return "\n".join(lines)

    def validate(self) -> None:
        """Assert partition, coalescing, and active-uniqueness invariants."""
        groups = sorted(self._groups.values(), key=lambda g: g.start)
        pos = 0
        prev_free = False
        for g in groups:
            if g.start != pos:
                raise AssertionError(f"gap or overlap at block {pos} (group {g.id})")
            if g.length < 1:
                raise AssertionError(f"group {g.id} has length {g.length}")
            if g.free and prev_free:
                raise AssertionError(f"adjacent free groups at {g.start}")
            if g.free and g.owner is not None:
                raise AssertionError(f"free group {g.id} has an owner")
            if not g.free and g.owner is None:
                raise AssertionError(f"used group {g.id} lacks an owner")
            if g.filled > g.length:
                raise AssertionError(f"group {g.id} overfilled")
            pos = g.end
            prev_free = g.free
        if pos != self.total_blocks:
            raise AssertionError(f"pool covers {pos} of {self.total_blocks} blocks")
        free_total = sum(g.length for g in groups if g.free)
        if free_total != self._free_total:
            raise AssertionError("free-block counter out of sync")
        for owner, gids in self._owned.items():
            actives = [g for g in gids if self._groups[g].active]
            if len(actives) != 1 or self._active.get(owner) != actives[0]:
                raise AssertionError(f"request {owner} active-group invariant broken")


def merge_adjacent(groups: Iterable[BlockGroup]) -> list[tuple[int, int]]:
    """Collapse groups into maximal contiguous (start, length) extents."""
    spans = sorted((g.start, g.length) for g in groups)
    out: list[tuple[int, int]] = []
    for start, length in spans:
        if out and out[-1][0] + out[-1][1] == start:
            out[-1] = (out[-1][0], out[-1][1] + length)
        else:
            out.append((start, length))
    return out
