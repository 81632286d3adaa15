"""Geometry, niche maps and the sparse block tree shared by every tree user.

A block ``(level, index)`` covers ``[index << level, (index + 1) << level)``.
Blocks are placed at a multiple of their size by construction, so the tree never
has to check alignment: it only ever merges siblings.

Niche maps are stored as tuples ordered from the level just below the node
down to ``min_level``; ``node_map[0]`` counts niches one level down.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

__all__ = [
    "GeometryConfig",
    "BlockId",
    "Node",
    "BlockTree",
    "StructuralError",
    "combine_niche_maps",
    "true_niche_counts",
    "render_tree",
    "parse_rendering",
    "semantic_content",
    "dumps",
    "loads",
]

FORMAT_VERSION = "v1"


class StructuralError(ValueError):
    """A tree (or a value fed to one) violates a structural invariant."""


@dataclass(frozen=True)
class GeometryConfig:
    height_bits: int
    min_level: int = 0
    counter_bits: int = 2

    def __post_init__(self):
        n, m, w = self.height_bits, self.min_level, self.counter_bits
        if not 0 <= m <= n <= 48:
            raise ValueError(f"need 0 <= min_level <= height_bits <= 48, got m={m} n={n}")
        if not 1 <= w <= 16:
            raise ValueError(f"counter_bits must lie in [1, 16], got {w}")

    @property
    def size(self) -> int:
        return 1 << self.height_bits

    @property
    def saturation(self) -> int:
        return (1 << self.counter_bits) - 1

    def map_length(self, level: int) -> int:
        return level - self.min_level

    def zero_map(self, level: int) -> tuple:
        return (0,) * (level - self.min_level)

    def check_block(self, level: int, index: int) -> None:
        if not self.min_level <= level <= self.height_bits:
            raise StructuralError(f"level {level} outside [{self.min_level}, {self.height_bits}]")
        if index < 0 or (index + 1) << level > self.size:
            raise StructuralError(f"block L{level} I{index} outside the address space")


@dataclass(frozen=True, order=True)
class BlockId:
    level: int
    index: int

    @property
    def base(self) -> int:
        return self.index << self.level

    @property
    def size(self) -> int:
        return 1 << self.level

    @classmethod
    def at(cls, base: int, level: int) -> "BlockId":
        if base & ((1 << level) - 1):
            raise StructuralError(f"address {base:#x} is not a multiple of {1 << level}")
        return cls(level, base >> level)

    def __repr__(self):
        return f"BlockId(L{self.level}@{self.base:#x})"


class Node:
    __slots__ = ("leaf", "left", "right", "map", "full", "back")

    def __init__(self, leaf=False, left=False, right=False, map=(), full=False, back=None):
        self.leaf = leaf
        self.left = left
        self.right = right
        self.map = map
        self.full = full
        self.back = back

    def has(self, side: int) -> bool:
        return self.right if side else self.left

    def set_child(self, side: int, present: bool) -> None:
        if side:
            self.right = present
        else:
            self.left = present

    def __repr__(self):
        kind = "leaf" if self.leaf else f"int(l={int(self.left)},r={int(self.right)})"
        return f"Node({kind}, map={list(self.map)})"


def _saturating_add(a: Sequence[int], b: Sequence[int], sat: int) -> list:
    return [x + y if x + y < sat else sat for x, y in zip(a, b)]


def combine_niche_maps(left: Optional[Sequence[int]], right: Optional[Sequence[int]],
                       child_level: int, config: GeometryConfig) -> tuple:
    """Parent map from the maps of its children (``None`` = missing child).

    The result gains one leading entry for ``child_level``: 1 when exactly
    one child is missing, 0 otherwise.
    """
    expected = child_level - config.min_level
    if left is None and right is None:
        raise StructuralError("both children missing: the parent should have been coalesced")
    for child in (left, right):
        if child is not None and len(child) != expected:
            raise StructuralError(f"child map has length {len(child)}, expected {expected}")
    sat = config.saturation
    if left is None:
        return (1, *right)
    if right is None:
        return (1, *left)
    return (0, *_saturating_add(left, right, sat))


class BlockTree:
    """Sparse binary tree over aligned blocks, one node store per level.

    Leaves are allocated (or backed) blocks.  A missing child of an interior
    node is a niche.  An empty tree is a single niche spanning the space.
    """

    def __init__(self, config: GeometryConfig):
        self.config = config
        self.levels: list[dict[int, Node]] = [dict() for _ in range(config.height_bits + 1)]

    # -- node store ---------------------------------------------------------

    @property
    def root(self) -> Optional[Node]:
        return self.levels[self.config.height_bits].get(0)

    def is_empty(self) -> bool:
        return 0 not in self.levels[self.config.height_bits]

    def get(self, level: int, index: int) -> Optional[Node]:
        return self.levels[level].get(index)

    def node_count(self) -> int:
        return sum(len(store) for store in self.levels)

    def nodes(self) -> Iterator[tuple[BlockId, Node]]:
        """All nodes, level descending then index ascending."""
        for level in range(self.config.height_bits, -1, -1):
            store = self.levels[level]
            for index in sorted(store):
                yield BlockId(level, index), store[index]

    def leaves(self) -> Iterator[BlockId]:
        for bid, node in self.nodes():
            if node.leaf:
                yield bid

    def niches(self) -> set:
        """Free blocks as ``(level, index)`` tuples."""
        if self.is_empty():
            return {(self.config.height_bits, 0)}
        out = set()
        for level in range(self.config.min_level + 1, self.config.height_bits + 1):
            below = level - 1
            for index, node in self.levels[level].items():
                if node.leaf:
                    continue
                if not node.left:
                    out.add((below, index << 1))
                if not node.right:
                    out.add((below, (index << 1) | 1))
        return out

    def child_maps(self, level: int, index: int) -> tuple:
        below = self.levels[level - 1]
        left = below.get(index << 1)
        right = below.get((index << 1) | 1)
        return (left.map if left is not None else None,
                right.map if right is not None else None)

    def recompute(self, level: int, index: int) -> tuple:
        """Recompute one interior node's niche map from its children."""
        node = self.levels[level][index]
        if node.leaf:
            return node.map
        left, right = self.child_maps(level, index)
        node.map = combine_niche_maps(left, right, level - 1, self.config)
        return node.map

    def recompute_path(self, level: int, index: int) -> None:
        """Recompute maps from ``(level, index)`` up to the root."""
        top = self.config.height_bits
        while level <= top:
            node = self.levels[level].get(index)
            if node is not None and not node.leaf:
                self.recompute(level, index)
            level += 1
            index >>= 1

    # -- structural edits ----------------------------------------------------

    def insert_leaf(self, level: int, index: int, **payload) -> Node:
        """Create a leaf and its missing ancestors; maps are left stale.

        The leaf must lie inside a niche (no existing node on or below it).
        Callers recompute the path afterwards.
        """
        cfg = self.config
        cfg.check_block(level, index)
        if index in self.levels[level]:
            raise StructuralError(f"block L{level} I{index} already present")
        node = Node(leaf=True, map=cfg.zero_map(level), **payload)
        self.levels[level][index] = node
        lvl, idx = level, index
        while lvl < cfg.height_bits:
            parent_idx = idx >> 1
            parent = self.levels[lvl + 1].get(parent_idx)
            if parent is None:
                parent = Node(map=cfg.zero_map(lvl + 1))
                self.levels[lvl + 1][parent_idx] = parent
                parent.set_child(idx & 1, True)
            else:
                if parent.leaf:
                    del self.levels[level][index]
                    raise StructuralError(f"block L{level} I{index} lies under a leaf")
                parent.set_child(idx & 1, True)
                break
            lvl, idx = lvl + 1, parent_idx
        return node

    def remove_leaf(self, level: int, index: int) -> tuple:
        """Remove a leaf, coalescing empty ancestors.

        Returns the ``(level, index)`` of the niche that the freed block
        merged into; maps above it are recomputed.
        """
        node = self.levels[level].get(index)
        if node is None or not node.leaf:
            raise StructuralError(f"no leaf at L{level} I{index}")
        del self.levels[level][index]
        top = self.config.height_bits
        lvl, idx = level, index
        while lvl < top:
            parent = self.levels[lvl + 1][idx >> 1]
            parent.set_child(idx & 1, False)
            if parent.left or parent.right:
                break
            del self.levels[lvl + 1][idx >> 1]
            lvl, idx = lvl + 1, idx >> 1
        if lvl < top:
            self.recompute_path(lvl + 1, idx >> 1)
        return lvl, idx

    # -- checks --------------------------------------------------------------

    def check(self) -> None:
        """Raise StructuralError unless every tree invariant holds."""
        cfg = self.config
        top = cfg.height_bits
        for level in range(top + 1):
            for index, node in self.levels[level].items():
                cfg.check_block(level, index)
                if level < top and (index >> 1) not in self.levels[level + 1]:
                    raise StructuralError(f"L{level} I{index} has no parent")
                if level < cfg.min_level:
                    raise StructuralError(f"node below min level at L{level}")
                if node.leaf:
                    if node.left or node.right:
                        raise StructuralError(f"leaf L{level} I{index} claims children")
                    if node.map != cfg.zero_map(level):
                        raise StructuralError(f"leaf L{level} I{index} has map {node.map}")
                    continue
                if not (node.left or node.right):
                    raise StructuralError(f"interior L{level} I{index} has no children")
                below = self.levels[level - 1]
                if node.left != ((index << 1) in below) or node.right != ((index << 1 | 1) in below):
                    raise StructuralError(f"child flags of L{level} I{index} disagree with store")
                left, right = self.child_maps(level, index)
                expected = combine_niche_maps(left, right, level - 1, cfg)
                if tuple(node.map) != expected:
                    raise StructuralError(
                        f"map of L{level} I{index} is {list(node.map)}, expected {list(expected)}")

    def copy(self) -> "BlockTree":
        other = BlockTree(self.config)
        for level, store in enumerate(self.levels):
            other.levels[level] = {
                i: Node(n.leaf, n.left, n.right, n.map, n.full, n.back) for i, n in store.items()
            }
        return other

    def __eq__(self, other):
        return isinstance(other, BlockTree) and dumps(self) == dumps(other)

    def __repr__(self):
        return f"BlockTree(n={self.config.height_bits}, nodes={self.node_count()})"


def true_niche_counts(tree: BlockTree, level: int, index: int) -> list:
    """Exact niche counts per level below ``(level, index)``, no saturation."""
    cfg = tree.config
    if tree.get(level, index) is None:
        raise StructuralError(f"no node at L{level} I{index}")
    counts = [0] * (level - cfg.min_level)
    stack = [(level, index)]
    while stack:
        lvl, idx = stack.pop()
        node = tree.levels[lvl][idx]
        if node.leaf:
            continue
        for child in (idx << 1, idx << 1 | 1):
            if child in tree.levels[lvl - 1]:
                stack.append((lvl - 1, child))
            else:
                counts[level - lvl] += 1
    return counts


# -- serialization -----------------------------------------------------------

_HEADER = re.compile(r"^geomtree (v\d+) n=(\d+) m=(\d+) w=(\d+)$")
_LINE = re.compile(r"^L(\d+) I(\d+) (leaf|int) map=\[([0-9,]*)\](.*)$")


def _payload_text(node: Node, vtree: bool) -> str:
    if not vtree:
        return ""
    if node.back is None:
        return f" full={int(node.full)}"
    return f" full={int(node.full)} back={node.back:#x}"


def dumps(tree: BlockTree, vtree: Optional[bool] = None) -> str:
    """Deterministic line-oriented text form of a tree."""
    cfg = tree.config
    if vtree is None:
        vtree = any(n.back is not None or n.full for _, n in tree.nodes())
    lines = [f"geomtree {FORMAT_VERSION} n={cfg.height_bits} m={cfg.min_level} w={cfg.counter_bits}"]
    for bid, node in tree.nodes():
        kind = "leaf" if node.leaf else "int"
        counters = ",".join(str(c) for c in node.map)
        lines.append(f"L{bid.level} I{bid.index} {kind} map=[{counters}]{_payload_text(node, vtree)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> BlockTree:
    """Inverse of :func:`dumps`; validates structure and maps."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise StructuralError("empty snapshot")
    head = _HEADER.match(lines[0].strip())
    if head is None:
        raise StructuralError(f"bad header: {lines[0]!r}")
    if head.group(1) != FORMAT_VERSION:
        raise StructuralError(f"unsupported snapshot version {head.group(1)}")
    cfg = GeometryConfig(int(head.group(2)), int(head.group(3)), int(head.group(4)))
    tree = BlockTree(cfg)
    for raw in lines[1:]:
        match = _LINE.match(raw.strip())
        if match is None:
            raise StructuralError(f"bad node line: {raw!r}")
        level, index = int(match.group(1)), int(match.group(2))
        cfg.check_block(level, index)
        counters = tuple(int(c) for c in match.group(4).split(",") if c != "")
        node = Node(leaf=match.group(3) == "leaf", map=counters)
        for field in match.group(5).split():
            key, _, value = field.partition("=")
            if key == "full":
                node.full = value == "1"
            elif key == "back":
                node.back = int(value, 0)
            else:
                raise StructuralError(f"unknown payload field {key!r}")
        if index in tree.levels[level]:
            raise StructuralError(f"duplicate node L{level} I{index}")
        tree.levels[level][index] = node
    for level in range(cfg.height_bits, 0, -1):
        below = tree.levels[level - 1]
        for index, node in tree.levels[level].items():
            if not node.leaf:
                node.left = (index << 1) in below
                node.right = (index << 1 | 1) in below
    tree.check()
    return tree


# -- figure rendering --------------------------------------------------------
#
# Figure grammar (one unit = one min-level block, 4 columns wide):
#   "Level k:" rows.  A present node spans '.' .. '.' filled with '-' and
#   carries its annotation centred: "[0110]" for niche maps, "0"/"1" for
#   vtree full bits.  A niche spans '.' .. '.' filled with "- - ".
#   Blocks that are neither (inside a niche, under a leaf) are blank.
#   Between levels a ':' row marks every block boundary of the row above.
#   The byte row shows 'x' (allocated), 'b' (backed) or '-' (free) per unit.
# Spaces too wide for a figure (more than 64 units) fall back to a listing:
#   "Level k: N<index><annotation> ... D<index> ...".

FIGURE_MAX_UNITS = 64
_CELL = 4


def _annotation(node: Node, vtree: bool) -> str:
    if vtree:
        return str(int(node.full))
    if not node.map:
        return ""
    if all(c < 10 for c in node.map):
        return "[" + "".join(str(c) for c in node.map) + "]"
    return "[" + ",".join(str(c) for c in node.map) + "]"


def _is_vtree(tree: BlockTree) -> bool:
    return any(n.back is not None for _, n in tree.nodes())


def _level_items(tree: BlockTree, level: int) -> list:
    """(index, kind, node) for present nodes and niches at one level."""
    cfg = tree.config
    items = [(i, "node", n) for i, n in tree.levels[level].items()]
    if level == cfg.height_bits and tree.is_empty():
        items.append((0, "niche", None))
    elif level < cfg.height_bits:
        for pidx, parent in tree.levels[level + 1].items():
            if parent.leaf:
                continue
            if not parent.left:
                items.append((pidx << 1, "niche", None))
            if not parent.right:
                items.append((pidx << 1 | 1, "niche", None))
    items.sort(key=lambda t: t[0])
    return items


def render_tree(tree: BlockTree, vtree: Optional[bool] = None) -> str:
    cfg = tree.config
    if vtree is None:
        vtree = _is_vtree(tree)
    n, m = cfg.height_bits, cfg.min_level
    units = 1 << (n - m)
    label = "Level {:>2}:  " if n >= 10 else "Level {}:  "
    pad = " " * len(label.format(0))
    if units > FIGURE_MAX_UNITS:
        rows = []
        for level in range(n, m - 1, -1):
            parts = []
            for index, kind, node in _level_items(tree, level):
                parts.append(f"N{index}{_annotation(node, vtree)}" if kind == "node" else f"D{index}")
            rows.append((label.format(level) + " ".join(parts)).rstrip())
        return "\n".join(rows) + "\n"

    width = units * _CELL + 1
    rows = []
    for level in range(n, m - 1, -1):
        span = (1 << (level - m)) * _CELL
        row = [" "] * width
        conn = [" "] * width
        for index, kind, node in _level_items(tree, level):
            start = index * span
            end = start + span
            row[start] = row[end] = "."
            conn[start] = conn[end] = ":"
            inner = span - 1
            if kind == "node":
                fill = ["-"] * inner
                text = _annotation(node, vtree)
                if text:
                    at = (inner - len(text)) // 2
                    fill[at:at + len(text)] = list(text)
            else:
                fill = ["-" if k % 2 == 0 else " " for k in range(inner)]
            row[start + 1:end] = fill
        rows.append((label.format(level) + "".join(row)).rstrip())
        rows.append((pad + "".join(conn)).rstrip())

    segments = [(bid.base >> m, bid.size >> m, mark) for bid in tree.leaves()
                for mark in ("b" if vtree else "x",)]
    segments += [(i << (lvl - m), 1 << (lvl - m), "-") for lvl, i in tree.niches()]
    cells = [" "] * width
    for first, count, mark in segments:
        start, end = first * _CELL, (first + count) * _CELL
        cells[start] = cells[end] = "|"
        cells[start + 1:end] = mark * (end - start - 1)
    cells = "".join(cells)
    digits = max(1, ((units - 1).bit_length() + 3) // 4)
    addr = "|" + "".join(f"{u:X}".center(_CELL - 1) + "|" for u in range(units))
    if digits > 3:
        addr = ""
    rows.append(pad + cells)
    if addr:
        rows.append(pad + addr)
    return "\n".join(rows) + "\n"


_ROW = re.compile(r"^Level\s+(\d+):(?:  (.*))?$")
_LIST_ITEM = re.compile(r"^(N|D)(\d+)(.*)$")


def _parse_annotation(text: str):
    text = text.strip().strip("-").strip()
    if not text:
        return ()
    if text.startswith("["):
        body = text[1:-1]
        if "," in body:
            return tuple(int(c) for c in body.split(","))
        return tuple(int(c) for c in body)
    return int(text)


def parse_rendering(text: str) -> dict:
    """Recover ``{"nodes": {(l, i): annotation}, "niches": {(l, i)}}``.

    Annotations are tuples (niche maps) or ints (full bits).
    """
    nodes: dict = {}
    niches: set = set()
    lines = text.splitlines()
    figure = any(line.strip().startswith("|") for line in lines)
    rows = [(int(mt.group(1)), mt.group(2) or "") for mt in map(_ROW.match, lines) if mt]
    if not rows:
        raise ValueError("no level rows found")
    min_level = min(level for level, _ in rows)
    for level, body in rows:
        if not figure:
            for token in body.split():
                item = _LIST_ITEM.match(token)
                if item is None:
                    raise ValueError(f"bad listing token {token!r}")
                index = int(item.group(2))
                if item.group(1) == "N":
                    nodes[(level, index)] = _parse_annotation(item.group(3))
                else:
                    niches.add((level, index))
            continue
        span = (1 << (level - min_level)) * _CELL
        dots = [k for k, ch in enumerate(body) if ch == "."]
        for start, end in zip(dots, dots[1:]):
            if end - start != span or start % span:
                continue
            inner = body[start + 1:end]
            if not inner.strip():
                continue
            if inner[0] == "-" and inner[1] == " ":
                niches.add((level, start // span))
            else:
                nodes[(level, start // span)] = _parse_annotation(inner)
    return {"nodes": nodes, "niches": niches}


def semantic_content(tree: BlockTree, vtree: Optional[bool] = None) -> dict:
    """What :func:`parse_rendering` should recover from ``render_tree(tree)``."""
    if vtree is None:
        vtree = _is_vtree(tree)
    nodes = {}
    for bid, node in tree.nodes():
        nodes[(bid.level, bid.index)] = int(node.full) if vtree else tuple(node.map)
    return {"nodes": nodes, "niches": set(tree.niches())}
