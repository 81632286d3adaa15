"""Geometric allocator over a :class:`~geomalloc.core.BlockTree`.

Placement is best fit: the root niche map names the smallest niche level
that can hold the request, then the descent follows non-zero counters down
to one such niche.  Arbitrary sizes are ledged into a descending run of
power-of-two pieces that share one niche.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Union

from .core import BlockId, BlockTree, GeometryConfig, StructuralError

__all__ = [
    "AllocError",
    "OutOfMemory",
    "InvalidFree",
    "InvalidSize",
    "PlacementPolicy",
    "LedgePlan",
    "AllocatorStats",
    "Allocator",
    "ledge_decompose",
    "best_fit_level",
    "find_niche",
    "alloc_block",
    "free_block",
    "alloc_chunk",
    "free_chunk",
    "chunk_blocks",
    "stats",
]


class AllocError(Exception):
    pass


class OutOfMemory(AllocError):
    pass


class InvalidFree(AllocError):
    pass


class InvalidSize(AllocError, ValueError):
    pass


class PlacementPolicy:
    """Tie-breaking between equally good left/right choices.

    ``leftmost`` and ``rightmost`` are fixed; ``random`` draws from a
    generator seeded once, so equal op sequences give equal trees.
    """

    VARIANTS = ("leftmost", "rightmost", "random")

    def __init__(self, variant: str = "leftmost", seed: int = 0):
        if variant not in self.VARIANTS:
            raise ValueError(f"unknown placement policy {variant!r}")
        self.variant = variant
        self.seed = seed
        self._rng = random.Random(seed) if variant == "random" else None

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "PlacementPolicy":
        return cls(text, seed)

    def pick(self, first_ok: bool, second_ok: bool) -> int:
        """Choose side 0 (left) or 1 (right) among the eligible ones."""
        if first_ok and second_ok:
            if self.variant == "leftmost":
                return 0
            if self.variant == "rightmost":
                return 1
            return self._rng.getrandbits(1)
        if first_ok:
            return 0
        if second_ok:
            return 1
        raise StructuralError("no eligible side")

    def end(self) -> int:
        """Which end of an oversized niche to place a request at."""
        return self.pick(True, True)

    def __repr__(self):
        if self.variant == "random":
            return f"PlacementPolicy(random, seed={self.seed})"
        return f"PlacementPolicy({self.variant})"


@dataclass(frozen=True)
class LedgePlan:
    """Pieces as ``(level, offset)`` pairs, largest first."""

    pieces: tuple
    rounded_size: int
    max_pieces: Optional[int] = None

    @property
    def total(self) -> int:
        return sum(1 << level for level, _ in self.pieces)

    @property
    def sizes(self) -> list:
        return [1 << level for level, _ in self.pieces]

    @property
    def offsets(self) -> list:
        return [offset for _, offset in self.pieces]

    @property
    def top_level(self) -> int:
        """Level of the smallest block able to hold the whole plan."""
        return (self.total - 1).bit_length()


def _binary_pieces(total: int) -> tuple:
    pieces = []
    offset = 0
    for level in range(total.bit_length() - 1, -1, -1):
        if total >> level & 1:
            pieces.append((level, offset))
            offset += 1 << level
    return tuple(pieces)


def ledge_decompose(size: int, config: GeometryConfig,
                    max_pieces: Optional[int] = None) -> LedgePlan:
    if size < 1:
        raise InvalidSize(f"size must be positive, got {size}")
    if size > config.size:
        raise InvalidSize(f"size {size} exceeds the {config.size}-byte space")
    if max_pieces is not None and max_pieces < 1:
        raise InvalidSize(f"max_pieces must be at least 1, got {max_pieces}")
    unit = 1 << config.min_level
    rounded = -(-size // unit) * unit
    total = rounded
    if max_pieces is not None:
        kept, rest = 0, rounded
        for _ in range(max_pieces - 1):
            if not rest:
                break
            top = 1 << (rest.bit_length() - 1)
            kept += top
            rest -= top
        # tail rounds up to one power of two; binary re-decomposition carries
        total = kept + ((1 << (rest - 1).bit_length()) if rest else 0)
    if total > config.size:
        raise InvalidSize(f"size {size} needs {total} bytes, more than the space")
    return LedgePlan(_binary_pieces(total), rounded, max_pieces)


def best_fit_level(source: Union[BlockTree, tuple, list, None], required_level: int,
                   config: Optional[GeometryConfig] = None) -> Optional[int]:
    """Smallest niche level ``>= required_level`` with a niche, else None.

    ``source`` is a tree, or a bare root map (``None`` meaning the empty
    tree, which then needs ``config``).  A bare map is read with
    ``min_level`` taken from ``config`` (0 when absent).
    """
    if isinstance(source, BlockTree):
        config = source.config
        if source.is_empty():
            return config.height_bits if required_level <= config.height_bits else None
        node_map = source.root.map
    elif source is None:
        if config is None:
            raise ValueError("an empty tree needs its config")
        return config.height_bits if required_level <= config.height_bits else None
    else:
        node_map = tuple(source)
    m = config.min_level if config is not None else 0
    top = len(node_map) - 1 + m
    for level in range(max(required_level, m), top + 1):
        if node_map[top - level]:
            return level
    return None


def find_niche(tree: BlockTree, level: int, policy: PlacementPolicy) -> tuple:
    """Descend to a niche of exactly ``level``; returns ``(level, index)``."""
    cfg = tree.config
    n = cfg.height_bits
    if tree.is_empty():
        if level != n:
            raise StructuralError(f"empty tree has no level-{level} niche")
        return n, 0
    levels = tree.levels
    k, idx = n, 0
    while True:
        below = levels[k - 1]
        ok = []
        for child in (idx << 1, idx << 1 | 1):
            node = below.get(child)
            if node is None:
                ok.append(k - 1 == level)
            else:
                ok.append(not node.leaf and k - 1 > level and node.map[k - 2 - level] > 0)
        side = policy.pick(ok[0], ok[1])
        child = idx << 1 | side
        if child not in below:
            return k - 1, child
        k, idx = k - 1, child


def _refresh(tree: BlockTree, blocks) -> None:
    """Recompute every ancestor of ``blocks`` once, bottom-up."""
    top = tree.config.height_bits
    pending = {}
    for level, index in blocks:
        pending.setdefault(level + 1, set()).add(index >> 1)
    for level in range(tree.config.min_level + 1, top + 1):
        indices = pending.get(level)
        if not indices:
            continue
        store = tree.levels[level]
        for index in indices:
            if index in store:
                tree.recompute(level, index)
            if level < top:
                pending.setdefault(level + 1, set()).add(index >> 1)


def _place(niche_level: int, niche_index: int, plan: LedgePlan, side: int) -> tuple:
    """Piece blocks of ``plan`` at one end of a niche; returns (base, blocks)."""
    start = niche_index << niche_level
    if side == 0:
        base = start
        blocks = [(lvl, (base + off) >> lvl) for lvl, off in plan.pieces]
    else:
        end = start + (1 << niche_level)
        base = end - plan.total
        blocks = []
        cursor = end
        for lvl, _ in plan.pieces:
            cursor -= 1 << lvl
            blocks.append((lvl, cursor >> lvl))
    return base, blocks


def chunk_blocks(base: int, plan: LedgePlan) -> list:
    """Block ids of a chunk placed at ``base``.

    Leftmost placement puts the largest piece first and is the only layout
    whose base is aligned to that piece; otherwise the pieces run downward
    from the chunk's end.
    """
    largest = plan.pieces[0][0]
    if base & ((1 << largest) - 1) == 0:
        return [(lvl, (base + off) >> lvl) for lvl, off in plan.pieces]
    blocks = []
    cursor = base + plan.total
    for lvl, _ in plan.pieces:
        cursor -= 1 << lvl
        if cursor & ((1 << lvl) - 1):
            raise InvalidFree(f"no chunk layout places {plan.total} bytes at {base:#x}")
        blocks.append((lvl, cursor >> lvl))
    return blocks


def alloc_block(tree: BlockTree, level: int, policy: PlacementPolicy) -> int:
    cfg = tree.config
    if not cfg.min_level <= level <= cfg.height_bits:
        raise InvalidSize(f"level {level} outside [{cfg.min_level}, {cfg.height_bits}]")
    q = best_fit_level(tree, level)
    if q is None:
        raise OutOfMemory(f"no niche of level >= {level}")
    niche_level, niche_index = find_niche(tree, q, policy)
    span = niche_level - level
    if policy.end() == 0:
        index = niche_index << span
    else:
        index = ((niche_index + 1) << span) - 1
    tree.insert_leaf(level, index)
    _refresh(tree, [(level, index)])
    return index << level


def free_block(tree: BlockTree, base: int, level: int) -> None:
    cfg = tree.config
    if not cfg.min_level <= level <= cfg.height_bits or base & ((1 << level) - 1) \
            or not 0 <= base < cfg.size:
        raise InvalidFree(f"no block of level {level} can start at {base:#x}")
    node = tree.get(level, base >> level)
    if node is None or not node.leaf:
        raise InvalidFree(f"no allocated level-{level} block at {base:#x}")
    tree.remove_leaf(level, base >> level)


def alloc_chunk(tree: BlockTree, size: int, policy: PlacementPolicy,
                max_pieces: Optional[int] = None) -> int:
    plan = ledge_decompose(size, tree.config, max_pieces)
    return place_plan(tree, plan, policy)[0]


def place_plan(tree: BlockTree, plan: LedgePlan, policy: PlacementPolicy) -> tuple:
    """Allocate every piece of ``plan`` inside one best-fit niche."""
    need = max(plan.top_level, tree.config.min_level)
    q = best_fit_level(tree, need)
    if q is None:
        raise OutOfMemory(f"no niche of {1 << need} bytes for a {plan.rounded_size}-byte chunk")
    niche_level, niche_index = find_niche(tree, q, policy)
    base, blocks = _place(niche_level, niche_index, plan, policy.end())
    for level, index in blocks:
        tree.insert_leaf(level, index)
    _refresh(tree, blocks)
    return base, blocks


def free_chunk(tree: BlockTree, base: int, size: int,
               max_pieces: Optional[int] = None) -> None:
    plan = ledge_decompose(size, tree.config, max_pieces)
    if not 0 <= base <= tree.config.size - plan.total:
        raise InvalidFree(f"chunk at {base:#x} of {size} bytes leaves the space")
    blocks = chunk_blocks(base, plan)
    for level, index in blocks:
        node = tree.get(level, index)
        if node is None or not node.leaf:
            raise InvalidFree(f"chunk at {base:#x}: no level-{level} piece at {index << level:#x}")
    for level, index in blocks:
        tree.remove_leaf(level, index)


@dataclass
class AllocatorStats:
    bytes_allocated: int = 0
    bytes_free: int = 0
    niche_histogram: dict = field(default_factory=dict)
    node_count: int = 0
    alloc_count: int = 0
    free_count: int = 0
    oom_count: int = 0

    def as_dict(self) -> dict:
        return {
            "bytes_allocated": self.bytes_allocated,
            "bytes_free": self.bytes_free,
            "niche_histogram": {str(k): v for k, v in sorted(self.niche_histogram.items())},
            "node_count": self.node_count,
            "alloc_count": self.alloc_count,
            "free_count": self.free_count,
            "oom_count": self.oom_count,
        }


def stats(tree: BlockTree) -> AllocatorStats:
    allocated = sum(1 << bid.level for bid in tree.leaves())
    histogram = Counter(level for level, _ in tree.niches())
    return AllocatorStats(
        bytes_allocated=allocated,
        bytes_free=tree.config.size - allocated,
        niche_histogram=dict(sorted(histogram.items())),
        node_count=tree.node_count(),
    )


class Allocator:
    """A tree, a policy and op counters; optionally checks after every op."""

    def __init__(self, config: GeometryConfig, policy: Optional[PlacementPolicy] = None,
                 max_pieces: Optional[int] = None, debug: bool = False):
        self.tree = BlockTree(config)
        self.policy = policy or PlacementPolicy()
        self.max_pieces = max_pieces
        self.debug = debug
        self.alloc_count = 0
        self.free_count = 0
        self.oom_count = 0

    @property
    def config(self) -> GeometryConfig:
        return self.tree.config

    def _done(self):
        if self.debug:
            self.tree.check()

    def alloc_block(self, level: int) -> int:
        try:
            base = alloc_block(self.tree, level, self.policy)
        except OutOfMemory:
            self.oom_count += 1
            raise
        self.alloc_count += 1
        self._done()
        return base

    def free_block(self, base: int, level: int) -> None:
        free_block(self.tree, base, level)
        self.free_count += 1
        self._done()

    def alloc_chunk(self, size: int) -> int:
        try:
            base = alloc_chunk(self.tree, size, self.policy, self.max_pieces)
        except OutOfMemory:
            self.oom_count += 1
            raise
        self.alloc_count += 1
        self._done()
        return base

    def free_chunk(self, base: int, size: int) -> None:
        free_chunk(self.tree, base, size, self.max_pieces)
        self.free_count += 1
        self._done()

    def stats(self) -> AllocatorStats:
        out = stats(self.tree)
        out.alloc_count = self.alloc_count
        out.free_count = self.free_count
        out.oom_count = self.oom_count
        return out

    # vtree backing provider interface
    def alloc_backing(self, level: int) -> int:
        return self.alloc_block(level)

    def free_backing(self, base: int, level: int) -> None:
        self.free_block(base, level)


