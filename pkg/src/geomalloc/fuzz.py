"""Differential fuzzing of the block-tree allocator against the byte model."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .core import GeometryConfig
from .oracle import ByteModel, OracleOp, VerdictFailure, apply, canonical_niches, oracle_best_fit
from .rtree import (OutOfMemory, PlacementPolicy, best_fit_level, free_block, free_chunk,
                    ledge_decompose, place_plan, alloc_block)
from .core import BlockTree
from .trace import format_op

__all__ = ["FuzzFailure", "FuzzResult", "SlotAllocator", "run_ops", "fuzz", "ddmin",
           "sweep_configs", "format_counterexample", "render_free_set"]

MUTANTS = ("misaligned-coalesce",)


@dataclass
class FuzzFailure:
    step: int
    message: str
    sut_free: list
    oracle_free: list


@dataclass
class FuzzResult:
    config: GeometryConfig
    ops: list = field(default_factory=list)
    failure: Optional[FuzzFailure] = None
    ooms: int = 0
    tree: Optional[BlockTree] = None


class SlotAllocator:
    """Power-of-two slots with split on alloc and merge on free.

    With ``check_alignment`` a freed slot merges only with its buddy, which
    makes this a plain buddy allocator.  Without it, any adjacent free slot
    of the same size is merged, the misaligned coalescing that geometric
    allocation rules out; the fuzzer uses that variant as a mutant.
    """

    def __init__(self, config: GeometryConfig, check_alignment: bool = True):
        self.config = config
        self.check_alignment = check_alignment
        self.free = {level: set() for level in range(config.height_bits + 1)}
        self.free[config.height_bits].add(0)
        self.misaligned_merges = 0

    def alloc(self, level: int) -> int:
        for have in range(level, self.config.height_bits + 1):
            if self.free[have]:
                addr = min(self.free[have])
                self.free[have].remove(addr)
                while have > level:
                    have -= 1
                    self.free[have].add(addr + (1 << have))
                return addr
        raise OutOfMemory(f"no free slot of level >= {level}")

    def release(self, addr: int, level: int) -> None:
        while level < self.config.height_bits:
            size = 1 << level
            slots = self.free[level]
            if self.check_alignment:
                partners = [addr ^ size]
            else:
                partners = [addr + size, addr - size]
            partner = next((p for p in partners if p in slots), None)
            if partner is None:
                break
            slots.remove(partner)
            addr = min(addr, partner)
            level += 1
            if addr % (1 << level):
                self.misaligned_merges += 1
        self.free[level].add(addr)

    def free_set(self) -> list:
        slots = [(addr, level) for level, addrs in self.free.items() for addr in addrs]
        return [f"L{level}@{addr:#x}" for addr, level in sorted(slots)]


def render_free_set(niches) -> list:
    return [f"L{level}@{index << level:#x}" for level, index in sorted(niches, key=lambda t: (t[1] << t[0], t[0]))]


class _Driver:
    """Applies ops to the system under test and the byte model in step."""

    def __init__(self, config: GeometryConfig, policy: PlacementPolicy,
                 max_pieces: Optional[int], mutant: Optional[str]):
        if mutant is not None and mutant not in MUTANTS:
            raise ValueError(f"unknown mutant {mutant!r}")
        self.config = config
        self.policy = policy
        self.max_pieces = max_pieces
        self.mutant = mutant
        self.tree = BlockTree(config)
        self.slots = SlotAllocator(config, check_alignment=False) if mutant else None
        self.model = ByteModel(config.height_bits)
        self.live: dict[str, tuple] = {}
        self.ooms = 0

    def sut_free_set(self) -> list:
        if self.slots is not None:
            return self.slots.free_set()
        return render_free_set(self.tree.niches())

    def oracle_free_set(self) -> list:
        return render_free_set(canonical_niches(self.model))

    def step(self, op: tuple) -> Optional[str]:
        """Apply one op; returns a mismatch description or None."""
        cfg = self.config
        if op[0] == "alloc":
            tag, size = op[1], op[2]
            if tag in self.live:
                return None
            block = len(op) > 3
            plan = ledge_decompose(size, cfg, self.max_pieces)
            fit = oracle_best_fit(self.model, size, cfg.min_level)
            try:
                if self.slots is not None:
                    base = self.slots.alloc(plan.top_level)
                    blocks = [(plan.top_level, base)]
                elif block:
                    level = plan.top_level
                    q = best_fit_level(self.tree, level)
                    if fit is not None and q != fit[0]:
                        return f"best fit level {q} but oracle says {fit[0]}"
                    base = alloc_block(self.tree, level, self.policy)
                    blocks = [(level, base)]
                else:
                    q = best_fit_level(self.tree, plan.top_level)
                    if fit is not None and q != fit[0]:
                        return f"best fit level {q} but oracle says {fit[0]}"
                    base, placed = place_plan(self.tree, plan, self.policy)
                    blocks = [(lvl, idx << lvl) for lvl, idx in placed]
            except OutOfMemory:
                self.ooms += 1
                if fit is not None:
                    return f"allocator out of memory for {size} bytes; oracle fits it at L{fit[0]}"
                return None
            if fit is None:
                return f"allocator placed {size} bytes at {base:#x}; oracle has no fitting niche"
            if self.slots is not None:
                total = 1 << plan.top_level
            else:
                total = plan.total
            try:
                apply(self.model, OracleOp("alloc", base, total, tuple(blocks)))
            except VerdictFailure as exc:
                return str(exc)
            self.live[tag] = (base, size, total, block)
        else:
            tag = op[1]
            if tag not in self.live:
                return None
            base, size, total, block = self.live.pop(tag)
            if self.slots is not None:
                self.slots.release(base, (total - 1).bit_length())
            elif block:
                free_block(self.tree, base, (total - 1).bit_length())
            else:
                free_chunk(self.tree, base, size, self.max_pieces)
            try:
                apply(self.model, OracleOp("free", base))
            except VerdictFailure as exc:
                return str(exc)
        if self.slots is None:
            got = set(self.tree.niches())
            want = canonical_niches(self.model)
            if got != want:
                return "niche sets differ"
        return None


class _Generator:
    def __init__(self, seed: int, config: GeometryConfig, live_cap: int = 48):
        self.rng = random.Random(seed)
        self.config = config
        self.live_cap = live_cap
        self.serial = 0

    def next(self, live: dict) -> tuple:
        rng = self.rng
        n, m = self.config.height_bits, self.config.min_level
        p_free = 0.0 if not live else (0.9 if len(live) >= self.live_cap else 0.45)
        if rng.random() < p_free:
            return ("free", rng.choice(sorted(live)))
        self.serial += 1
        tag = f"t{self.serial}"
        big = rng.random() < 0.03
        if rng.random() < 0.5:
            level = rng.randint(m, n if big else max(m, n - 3))
            return ("alloc", tag, 1 << level, "block")
        top = n if big else max(1, n - 3)
        level = rng.randint(0, top)
        return ("alloc", tag, rng.randint(1, 1 << level))


def sweep_configs(height_bits: int = 16) -> list:
    """Every (min_level, counter_bits) pairing the fuzzer cycles through."""
    return [GeometryConfig(height_bits, m, w) for m in range(0, 5) for w in range(1, 4)]


def run_ops(config: GeometryConfig, ops: list, policy: Optional[PlacementPolicy] = None,
            max_pieces: Optional[int] = None, mutant: Optional[str] = None) -> FuzzResult:
    """Replay a fixed op list through the differential loop."""
    driver = _Driver(config, policy or PlacementPolicy(), max_pieces, mutant)
    result = FuzzResult(config, list(ops))
    for i, op in enumerate(ops):
        message = driver.step(op)
        if message is not None:
            result.failure = FuzzFailure(i, message, driver.sut_free_set(), driver.oracle_free_set())
            break
    result.ooms = driver.ooms
    result.tree = driver.tree
    return result


def fuzz(config: GeometryConfig, count: int, seed: int, policy: Optional[PlacementPolicy] = None,
         max_pieces: Optional[int] = None, mutant: Optional[str] = None) -> FuzzResult:
    """Generate ``count`` ops online (frees always name live chunks)."""
    policy = policy or PlacementPolicy("leftmost", seed)
    driver = _Driver(config, policy, max_pieces, mutant)
    gen = _Generator(seed, config)
    result = FuzzResult(config)
    for i in range(count):
        op = gen.next(driver.live)
        result.ops.append(op)
        message = driver.step(op)
        if message is not None:
            result.failure = FuzzFailure(i, message, driver.sut_free_set(), driver.oracle_free_set())
            break
    result.ooms = driver.ooms
    result.tree = driver.tree
    return result


def ddmin(ops: list, fails) -> list:
    """Shrink ``ops`` to a 1-minimal list on which ``fails`` still holds."""
    granularity = 2
    while len(ops) >= 2:
        chunk = -(-len(ops) // granularity)
        subsets = [ops[i:i + chunk] for i in range(0, len(ops), chunk)]
        reduced = False
        for i in range(len(subsets)):
            complement = [op for j, s in enumerate(subsets) if j != i for op in s]
            if fails(subsets[i]):
                ops, granularity, reduced = subsets[i], 2, True
                break
            if fails(complement):
                ops, granularity, reduced = complement, max(granularity - 1, 2), True
                break
        if not reduced:
            if granularity >= len(ops):
                break
            granularity = min(len(ops), granularity * 2)
    return ops


def format_counterexample(result: FuzzResult, policy: str, max_pieces: Optional[int]) -> str:
    cfg = result.config
    failure = result.failure
    lines = [
        f"# differential mismatch at op {failure.step + 1}: {failure.message}",
        f"# config n={cfg.height_bits} m={cfg.min_level} w={cfg.counter_bits} "
        f"policy={policy} max_pieces={max_pieces or 0}",
        "# allocator free set: " + " ".join(failure.sut_free),
        "# oracle free set:    " + " ".join(failure.oracle_free),
    ]
    lines += [format_op(op[:3]) for op in result.ops[:failure.step + 1]]
    return "\n".join(lines) + "\n"
