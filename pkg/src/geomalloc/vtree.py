"""Virtual spaces mapped onto real memory through block trees.

Each space owns a block tree over its virtual addresses.  Leaves are backed
by a real block of the same level (taken from a backing provider, normally
an :class:`~geomalloc.rtree.Allocator`); every node carries a full bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

from .core import BlockTree, GeometryConfig, StructuralError
from .rtree import OutOfMemory, _refresh, ledge_decompose

__all__ = [
    "VmError", "InvalidHandle", "OutOfBounds", "UnbackedFault", "Trap", "BackingFailure",
    "PopulationStrategy", "AccessResult", "VirtualSpace", "SpaceManager", "check_full_bits",
]


class VmError(Exception):
    code = "vm-error"


class InvalidHandle(VmError):
    code = "invalid-handle"


class OutOfBounds(VmError):
    code = "out-of-bounds"


class UnbackedFault(VmError):
    code = "unbacked"


class Trap(OutOfBounds):
    """Access past the end of a fixed-size space."""

    code = "trap"


class BackingFailure(VmError):
    code = "backing-failure"


@dataclass(frozen=True)
class PopulationStrategy:
    kind: str
    size: Optional[int] = None
    page_level: Optional[int] = None

    @classmethod
    def doubling(cls) -> "PopulationStrategy":
        return cls("doubling")

    @classmethod
    def fixed_ledged(cls, size: int) -> "PopulationStrategy":
        if size < 1:
            raise ValueError("fixed size must be at least 1")
        return cls("fixed_ledged", size=size)

    @classmethod
    def fixed_paging(cls, page_level: int) -> "PopulationStrategy":
        return cls("fixed_paging", page_level=page_level)

    def __str__(self):
        if self.kind == "fixed_ledged":
            return f"fixed({self.size})"
        if self.kind == "fixed_paging":
            return f"paging:{self.page_level}"
        return self.kind


@dataclass(frozen=True)
class AccessResult:
    backing_base: int
    level: int
    offset_in_block: int

    @property
    def address(self) -> int:
        return self.backing_base + self.offset_in_block


class VirtualSpace:
    def __init__(self, handle: int, strategy: PopulationStrategy, bound: int,
                 config: GeometryConfig):
        self.handle = handle
        self.strategy = strategy
        self.bound = bound
        self.tree = BlockTree(config)

    def leaves(self):
        for bid in self.tree.leaves():
            yield bid, self.tree.get(bid.level, bid.index)

    def backed_bytes(self) -> int:
        return sum(1 << bid.level for bid in self.tree.leaves())

    def backed_set(self) -> set:
        out = set()
        for bid in self.tree.leaves():
            out.update(range(bid.base, bid.base + bid.size))
        return out

    def lookup(self, y: int):
        """Leaf covering ``y`` as ``(level, index, node)``, or None."""
        tree = self.tree
        n = tree.config.height_bits
        node = tree.root
        level, index = n, 0
        while node is not None and not node.leaf:
            level -= 1
            index = y >> level
            node = tree.levels[level].get(index)
        if node is None:
            return None
        return level, index, node


def _set_full_bits(tree: BlockTree, level: int, index: int) -> None:
    """Recompute full bits from ``(level, index)``'s parent up to the root."""
    top = tree.config.height_bits
    while level < top:
        level += 1
        index >>= 1
        node = tree.levels[level][index]
        below = tree.levels[level - 1]
        left = below.get(index << 1)
        right = below.get(index << 1 | 1)
        node.full = bool(left is not None and right is not None and left.full and right.full)


def check_full_bits(space: VirtualSpace) -> None:
    """Raise StructuralError unless full bits match the backed set."""
    backed = space.backed_set()
    for bid, node in space.tree.nodes():
        whole = all(a in backed for a in range(bid.base, bid.base + bid.size))
        if node.full != whole:
            raise StructuralError(f"full bit of L{bid.level}@{bid.base:#x} is {int(node.full)}")


class SpaceManager:
    """Live spaces plus the provider that backs them.

    ``backing`` needs ``alloc_backing(level) -> base`` (raising
    :class:`~geomalloc.rtree.OutOfMemory` when exhausted) and
    ``free_backing(base, level)``.
    """

    def __init__(self, config: GeometryConfig, backing, debug: bool = False):
        self.config = config
        self.backing = backing
        self.debug = debug
        self.spaces: dict[int, VirtualSpace] = {}
        self._handles = itertools.count(1)

    def space(self, handle: int) -> VirtualSpace:
        try:
            return self.spaces[handle]
        except KeyError:
            raise InvalidHandle(f"no live space {handle}") from None

    def _back(self, space: VirtualSpace, level: int, index: int) -> None:
        try:
            real = self.backing.alloc_backing(level)
        except OutOfMemory as exc:
            raise BackingFailure(f"no real block of level {level}: {exc}") from None
        space.tree.insert_leaf(level, index, full=True, back=real)
        _refresh(space.tree, [(level, index)])
        _set_full_bits(space.tree, level, index)

    def create_space(self, strategy: PopulationStrategy, size: Optional[int] = None) -> int:
        cfg = self.config
        if size is None:
            size = strategy.size if strategy.size is not None else cfg.size
        if not 1 <= size <= cfg.size:
            raise OutOfBounds(f"space size {size} outside [1, {cfg.size}]")
        if strategy.kind == "fixed_paging" and not (
                strategy.page_level is not None and cfg.min_level <= strategy.page_level <= cfg.height_bits):
            raise ValueError(f"page level {strategy.page_level} outside [{cfg.min_level}, {cfg.height_bits}]")
        if strategy.kind == "fixed_ledged" and strategy.size != size:
            strategy = PopulationStrategy.fixed_ledged(size)
        bound = cfg.size if strategy.kind == "doubling" else size
        handle = next(self._handles)
        space = VirtualSpace(handle, strategy, bound, cfg)
        if strategy.kind == "fixed_ledged":
            plan = ledge_decompose(size, cfg)
            done = []
            try:
                for level, offset in plan.pieces:
                    self._back(space, level, offset >> level)
                    done.append(level)
            except BackingFailure:
                for bid, node in list(space.leaves()):
                    self.backing.free_backing(node.back, bid.level)
                raise
        self.spaces[handle] = space
        self._check(space)
        return handle

    def destroy_space(self, handle: int) -> None:
        space = self.space(handle)
        for bid, node in list(space.leaves()):
            self.backing.free_backing(node.back, bid.level)
        del self.spaces[handle]

    def translate(self, handle: int, y: int) -> AccessResult:
        space = self.space(handle)
        if not 0 <= y < space.bound:
            if space.strategy.kind == "fixed_ledged":
                raise Trap(f"offset {y:#x} beyond fixed space of {space.bound} bytes")
            raise OutOfBounds(f"offset {y:#x} beyond space bound {space.bound:#x}")
        hit = space.lookup(y)
        if hit is None:
            raise UnbackedFault(f"offset {y:#x} of space {handle} is not backed")
        level, index, node = hit
        return AccessResult(node.back, level, y - (index << level))

    def access(self, handle: int, y: int) -> AccessResult:
        space = self.space(handle)
        kind = space.strategy.kind
        if kind == "fixed_ledged" or not 0 <= y < space.bound:
            return self.translate(handle, y)
        if space.lookup(y) is None:
            if kind == "fixed_paging":
                p = space.strategy.page_level
                self._back(space, p, y >> p)
            else:
                level, index = self._doubling_target(space, y)
                self._back(space, level, index)
            self._check(space)
        return self.translate(handle, y)

    def _doubling_target(self, space: VirtualSpace, y: int) -> tuple:
        """Block to back for an unbacked ``y`` under the doubling rule."""
        tree = space.tree
        m = self.config.min_level
        level, index = self.config.height_bits, 0
        node = tree.root
        while node is not None:
            level -= 1
            index = y >> level
            child = tree.levels[level].get(index)
            if child is None:
                sibling = tree.levels[level].get(index ^ 1)
                if sibling is not None and sibling.full:
                    return level, index
                break
            node = child
        return m, y >> m

    def backed_bytes(self, handle: int) -> int:
        return self.space(handle).backed_bytes()

    def _check(self, space: VirtualSpace) -> None:
        if self.debug:
            space.tree.check()
            check_full_bits(space)
