"""Brute-force reference model: one flag per byte, no tree.

Used only to judge the allocator.  Every query scans the whole space, so
differential runs keep ``height_bits <= 16``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels

__all__ = ["ByteModel", "OracleOp", "VerdictFailure", "canonical_niches",
           "oracle_best_fit", "apply", "free_bytes"]

MAX_ORACLE_BITS = 20


class VerdictFailure(AssertionError):
    """The system under test did something the byte model rejects."""


@dataclass(frozen=True)
class OracleOp:
    """An alloc carries the placement chosen by the system under test.

    ``blocks`` lists ``(level, address)`` pieces for an alloc, so a
    misplaced piece can be expressed at all; a free names the chunk by
    ``base``.
    """

    kind: str
    base: int
    size: int = 0
    blocks: tuple = ()


class ByteModel:
    def __init__(self, height_bits: int):
        if height_bits > MAX_ORACLE_BITS:
            raise ValueError(f"oracle is limited to {MAX_ORACLE_BITS} address bits")
        self.height_bits = height_bits
        self.occupancy = np.zeros(1 << height_bits, dtype=np.uint8)
        self.chunks: dict[int, int] = {}

    @property
    def size(self) -> int:
        return 1 << self.height_bits

    def copy(self) -> "ByteModel":
        other = ByteModel(self.height_bits)
        other.occupancy = self.occupancy.copy()
        other.chunks = dict(self.chunks)
        return other

    def check(self) -> None:
        covered = np.zeros_like(self.occupancy)
        for base, size in self.chunks.items():
            if covered[base:base + size].any():
                raise VerdictFailure(f"registry extents overlap at {base:#x}")
            covered[base:base + size] = 1
        if not np.array_equal(covered, self.occupancy):
            raise VerdictFailure("registry does not cover the allocated flags exactly")


def free_bytes(model: ByteModel) -> set:
    return set(np.flatnonzero(model.occupancy == 0).tolist())


def canonical_niches(model: ByteModel, min_level: int = 0) -> set:
    """Maximal free blocks starting at a multiple of their size, as ``(level, index)``.

    A free run that is not a whole number of min-level units shows up as
    blocks below ``min_level``; the allocator never produces those.
    """
    del min_level  # decomposition is taken at byte precision on purpose
    return set(kernels.canonical_niches(model.occupancy, model.height_bits, 0))


def oracle_best_fit(model: ByteModel, size: int, min_level: int = 0) -> Optional[tuple]:
    """Smallest (then leftmost) canonical niche holding ``size`` bytes."""
    unit = 1 << min_level
    rounded = -(-size // unit) * unit
    fitting = [(level, index) for level, index in canonical_niches(model)
               if (1 << level) >= rounded]
    return min(fitting) if fitting else None


def apply(model: ByteModel, op: OracleOp) -> None:
    if op.kind == "alloc":
        if not op.blocks:
            raise VerdictFailure("alloc with no placement")
        extent = []
        for level, base in op.blocks:
            size = 1 << level
            if base < 0 or base + size > model.size:
                raise VerdictFailure(f"piece L{level}@{base:#x} leaves the space")
            if base % size:
                raise VerdictFailure(f"piece of {size} bytes at {base:#x} is misaligned")
            if model.occupancy[base:base + size].any():
                raise VerdictFailure(f"piece L{level}@{base:#x} overlaps live memory")
            extent.append((base, size))
        extent.sort()
        for (a, sa), (b, _) in zip(extent, extent[1:]):
            if a + sa != b:
                raise VerdictFailure(f"chunk pieces are not contiguous at {a + sa:#x}")
        start = extent[0][0]
        total = sum(s for _, s in extent)
        if start != op.base:
            raise VerdictFailure(f"chunk base {op.base:#x} differs from its lowest piece {start:#x}")
        model.occupancy[start:start + total] = 1
        model.chunks[start] = total
    elif op.kind == "free":
        size = model.chunks.pop(op.base, None)
        if size is None:
            raise VerdictFailure(f"free of unknown extent at {op.base:#x}")
        model.occupancy[op.base:op.base + size] = 0
    else:
        raise ValueError(f"unknown oracle op {op.kind!r}")
