"""Command-line front end: replay, demo, fuzz, pipeline.

Exit codes: 0 clean, 1 fuzz mismatch, 2 bad input (flags, trace or
workload), 3 internal invariant failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .core import BlockTree, GeometryConfig, StructuralError, render_tree
from .fuzz import MUTANTS, ddmin, format_counterexample, fuzz, run_ops, sweep_configs
from .pipeline import PipelineSim, random_workload
from .rtree import (_refresh, AllocError, Allocator, InvalidSize, OutOfMemory, PlacementPolicy,
                    alloc_block, alloc_chunk, free_block, ledge_decompose, stats)
from .trace import TraceError, format_op, parse_trace, parse_workload
from .vtree import (BackingFailure, OutOfBounds, PopulationStrategy, SpaceManager, Trap,
                    UnbackedFault, check_full_bits)

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3

DEMOS = ("steps", "sparse-tree", "niche-maps", "vtree-doubling", "fixed-11")


class _InputError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--space-bits", type=int, default=16, metavar="N")
    parser.add_argument("--min-block-bits", type=int, default=4, metavar="M")
    parser.add_argument("--counter-bits", type=int, default=2, metavar="W")
    parser.add_argument("--policy", choices=PlacementPolicy.VARIANTS, default="leftmost")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--stats-out", metavar="PATH")
    parser.add_argument("--max-pieces", type=int, metavar="K")


def _config(args) -> GeometryConfig:
    try:
        return GeometryConfig(args.space_bits, args.min_block_bits, args.counter_bits)
    except ValueError as exc:
        raise _InputError(str(exc)) from None


def _config_doc(args, config: GeometryConfig) -> dict:
    return {
        "n": config.height_bits,
        "m": config.min_level,
        "w": config.counter_bits,
        "policy": args.policy,
        "seed": args.seed,
        "max_pieces": args.max_pieces or 0,
    }


def _emit(args, doc) -> None:
    text = doc if isinstance(doc, str) else json.dumps(doc, indent=2) + "\n"
    if args.stats_out:
        with open(args.stats_out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- replay -----------------------------------------------------------------

class Replayer:
    """Applies trace ops to one allocator and one space manager."""

    def __init__(self, config: GeometryConfig, policy: PlacementPolicy,
                 max_pieces: Optional[int] = None, check_every_op: bool = False):
        self.config = config
        self.allocator = Allocator(config, policy, max_pieces)
        self.spaces = SpaceManager(config, self.allocator)
        self.chunks: dict[str, tuple] = {}
        self.handles: dict[str, int] = {}
        self.events = {"oom": 0, "traps": 0, "invalid_ops": 0}
        self.series: list = []
        self.check_every_op = check_every_op

    def _live(self, tag: str) -> bool:
        return tag in self.chunks or tag in self.handles

    def apply(self, lineno: int, op: tuple) -> None:
        kind, tag = op[0], op[1]
        if kind in ("alloc", "vspace") and self._live(tag):
            raise TraceError(lineno, f"tag {tag!r} is already live")
        if kind == "free" and tag not in self.chunks:
            raise TraceError(lineno, f"free of unknown chunk tag {tag!r}")
        if kind in ("vdestroy", "access") and tag not in self.handles:
            raise TraceError(lineno, f"unknown space tag {tag!r}")
        if kind == "alloc":
            size = op[2]
            try:
                self.chunks[tag] = (self.allocator.alloc_chunk(size), size)
            except InvalidSize:
                self.events["invalid_ops"] += 1
            except OutOfMemory:
                self.events["oom"] += 1
        elif kind == "free":
            base, size = self.chunks.pop(tag)
            self.allocator.free_chunk(base, size)
        elif kind == "vspace":
            strategy, size = op[2], op[3]
            try:
                if strategy.kind == "doubling":
                    handle = self.spaces.create_space(strategy)
                else:
                    handle = self.spaces.create_space(strategy, size)
            except BackingFailure:
                self.events["oom"] += 1
            except (OutOfBounds, ValueError):
                self.events["invalid_ops"] += 1
            else:
                self.handles[tag] = handle
        elif kind == "vdestroy":
            self.spaces.destroy_space(self.handles.pop(tag))
        else:
            try:
                self.spaces.access(self.handles[tag], op[2])
            except Trap:
                self.events["traps"] += 1
            except BackingFailure:
                self.events["oom"] += 1
            except (OutOfBounds, UnbackedFault):
                self.events["invalid_ops"] += 1
        if self.check_every_op:
            self.check()
        self.series.append(stats(self.allocator.tree).bytes_allocated)

    def check(self) -> None:
        self.allocator.tree.check()
        for handle in self.handles.values():
            space = self.spaces.space(handle)
            space.tree.check()
            check_full_bits(space)
        st = self.allocator.stats()
        if st.bytes_allocated + st.bytes_free != self.config.size:
            raise StructuralError("byte accounting does not balance")
        backed = sum(self.spaces.space(h).backed_bytes() for h in self.handles.values())
        owned = backed + sum(
            ledge_decompose(size, self.config, self.allocator.max_pieces).total
            for _, size in self.chunks.values())
        if owned != st.bytes_allocated:
            raise StructuralError(f"{st.bytes_allocated} bytes allocated, {owned} owned")

    def report(self, config_doc: dict, series: bool = False) -> dict:
        doc = {
            "config": config_doc,
            "allocator": self.allocator.stats().as_dict(),
            "spaces": {
                tag: {"backed_bytes": self.spaces.space(h).backed_bytes(),
                      "node_count": self.spaces.space(h).tree.node_count()}
                for tag, h in sorted(self.handles.items())
            },
            "events": dict(self.events),
        }
        if series:
            doc["series"] = {"bytes_allocated": list(self.series)}
        return doc


def cmd_replay(args) -> int:
    config = _config(args)
    try:
        with open(args.trace) as fh:
            text = fh.read()
    except OSError as exc:
        raise _InputError(f"cannot read trace: {exc}") from None
    ops = parse_trace(text)
    replayer = Replayer(config, PlacementPolicy(args.policy, args.seed), args.max_pieces,
                        args.check_every_op)
    try:
        for lineno, op in ops:
            replayer.apply(lineno, op)
        replayer.check()
    except TraceError:
        raise
    except (StructuralError, AssertionError, AllocError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    _emit(args, replayer.report(_config_doc(args, config), args.series))
    return EXIT_OK


# -- demos ------------------------------------------------------------------

def _hexset(values) -> str:
    return "{" + ",".join(f"{v:X}" for v in sorted(values)) + "}"


def _niche_list(tree: BlockTree) -> str:
    items = sorted(tree.niches(), key=lambda t: (t[1] << t[0], t[0]))
    return " ".join(f"L{level}@{index << level:X}" for level, index in items) or "(none)"


def demo_steps() -> str:
    cfg = GeometryConfig(4, 0, 2)
    tree = BlockTree(cfg)
    policy = PlacementPolicy()
    out = []
    bases = [alloc_chunk(tree, size, policy) for size in (4, 2, 2, 2, 2, 4)]

    def show(label):
        out.append(f"{label}  niches: {_niche_list(tree)}")
        out.append(render_tree(tree))

    show("Step 1: two large and four small blocks")
    free_block(tree, bases[2], 1)
    free_block(tree, bases[3], 1)
    show("Step 2: free 6-7 and 8-9 (6 is not a multiple of 4, no merge)")
    free_block(tree, bases[4], 1)
    show("Step 5.1: free A-B (8-B merges)")
    free_block(tree, bases[1], 1)
    show("Step 5.2: free 4-5 (4-7 merges)")
    free_block(tree, bases[0], 2)
    show("Step 5.2: free 0-3 (0-7 merges)")
    free_block(tree, bases[5], 2)
    show("Step 5.2: free C-F (whole memory)")
    return "\n".join(out)


def _figure_tree(counter_bits: int) -> BlockTree:
    cfg = GeometryConfig(4, 0, counter_bits)
    tree = BlockTree(cfg)
    for level, index in ((2, 0), (1, 2), (2, 3)):
        tree.insert_leaf(level, index)
    _refresh(tree, [(2, 0), (1, 2), (2, 3)])
    return tree


def demo_sparse_tree() -> str:
    tree = _figure_tree(2)
    out = [f"sparse block tree  niches: {_niche_list(tree)}", render_tree(tree)]
    base = alloc_block(tree, 1, PlacementPolicy())
    out.append(f"alloc_block(level 1) -> {base:X}")
    out.append(render_tree(tree))
    return "\n".join(out)


def demo_niche_maps() -> str:
    out = []
    for w in (2, 1):
        tree = _figure_tree(w)
        out.append(f"niche maps, {w}-bit counters")
        out.append(render_tree(tree))
    return "\n".join(out)


class _Bump:
    """Backing provider for demos: hands out addresses in order."""

    def __init__(self):
        self.next = 0

    def alloc_backing(self, level: int) -> int:
        base = -(-self.next // (1 << level)) << level
        self.next = base + (1 << level)
        return base

    def free_backing(self, base: int, level: int) -> None:
        pass


def demo_vtree_doubling() -> str:
    cfg = GeometryConfig(4, 0, 2)
    manager = SpaceManager(cfg, _Bump())
    handle = manager.create_space(PopulationStrategy.doubling())
    space = manager.space(handle)
    out = ["pristine space", render_tree(space.tree, vtree=True)]
    for y in (0x8, 0x9, 0xB):
        manager.access(handle, y)
        out.append(f"access {y:X}  backed: {_hexset(space.backed_set())}")
        out.append(render_tree(space.tree, vtree=True))
    return "\n".join(out)


def demo_fixed_11() -> str:
    cfg = GeometryConfig(4, 0, 2)
    manager = SpaceManager(cfg, _Bump())
    handle = manager.create_space(PopulationStrategy.fixed_ledged(11))
    space = manager.space(handle)
    out = [f"fixed space of 11 bytes  backed_bytes: {space.backed_bytes()}  "
           f"nodes: {space.tree.node_count()}",
           render_tree(space.tree, vtree=True)]
    try:
        manager.translate(handle, 11)
    except Trap as exc:
        out.append(f"translate B -> {exc.code}: {exc}")
    return "\n".join(out)


DEMO_FUNCS = {
    "steps": demo_steps,
    "sparse-tree": demo_sparse_tree,
    "niche-maps": demo_niche_maps,
    "vtree-doubling": demo_vtree_doubling,
    "fixed-11": demo_fixed_11,
}


def cmd_demo(args) -> int:
    func = DEMO_FUNCS.get(args.figure)
    if func is None:
        raise _InputError(f"unknown demo {args.figure!r}; choose from {', '.join(DEMOS)}")
    print(func())
    return EXIT_OK


# -- fuzz -------------------------------------------------------------------

def _fuzz_stats(args, config, result) -> dict:
    tree = result.tree
    st = stats(tree)
    allocs = sum(1 for op in result.ops if op[0] == "alloc") - result.ooms
    st.alloc_count = allocs
    st.free_count = sum(1 for op in result.ops if op[0] == "free")
    st.oom_count = result.ooms
    return {
        "config": _config_doc(args, config),
        "allocator": st.as_dict(),
        "spaces": {},
        "events": {"oom": result.ooms, "traps": 0, "invalid_ops": 0},
    }


def cmd_fuzz(args) -> int:
    if args.space_bits > 16:
        raise _InputError("fuzzing is limited to --space-bits 16 (the oracle is a byte array)")
    if args.ops < 0:
        raise _InputError("--ops must be non-negative")
    if args.sweep and args.emit:
        raise _InputError("--emit needs a single configuration; drop --sweep")
    base_config = _config(args)
    configs = sweep_configs(args.space_bits) if args.sweep else [base_config]
    per = -(-args.ops // len(configs)) if args.ops else 0
    remaining = args.ops
    for i, config in enumerate(configs):
        count = min(per, remaining)
        remaining -= count
        seed = args.seed if len(configs) == 1 else args.seed * 1000 + i
        policy = PlacementPolicy(args.policy, seed)
        result = fuzz(config, count, seed, policy, args.max_pieces, args.mutant)
        if result.failure is not None:
            ops = result.ops[:result.failure.step + 1]

            def fails(candidate, config=config):
                failure = run_ops(config, candidate, PlacementPolicy(args.policy, seed),
                                  args.max_pieces, args.mutant).failure
                return failure is not None and (
                    args.mutant is None or "misaligned" in failure.message)

            small = ddmin(ops, fails) if fails(ops) else ops
            replay = run_ops(config, small, PlacementPolicy(args.policy, seed),
                             args.max_pieces, args.mutant)
            if replay.failure is None:
                replay = result
            with open(args.counterexample, "w") as fh:
                fh.write(format_counterexample(replay, args.policy, args.max_pieces))
            print(f"fuzz: mismatch after {result.failure.step + 1} ops "
                  f"(n={config.height_bits} m={config.min_level} w={config.counter_bits}): "
                  f"{result.failure.message}; minimized to {len(small)} ops in "
                  f"{args.counterexample}")
            return EXIT_MISMATCH
        if args.emit:
            with open(args.emit, "w") as fh:
                fh.write("".join(format_op(op[:3]) + "\n" for op in result.ops))
        if args.stats_out and not args.sweep:
            _emit(args, _fuzz_stats(args, config, result))
    print(f"fuzz: {args.ops} ops over {len(configs)} configuration(s), seed {args.seed}: ok")
    return EXIT_OK


# -- pipeline ---------------------------------------------------------------

def parse_prealloc(text: Optional[str], config: GeometryConfig) -> dict:
    """``"2"`` (every level), ``"0-4:2"`` or ``"3:1,5:2"`` -> {level: depth}."""
    if not text:
        return {}
    levels = range(config.min_level, config.height_bits + 1)
    if ":" not in text:
        depth = int(text)
        return {level: depth for level in levels}
    out = {}
    for item in text.split(","):
        span, depth = item.split(":")
        if "-" in span:
            lo, hi = (int(v) for v in span.split("-"))
        else:
            lo = hi = int(span)
        for level in range(lo, hi + 1):
            out[level] = int(depth)
    return out


def cmd_pipeline(args) -> int:
    config = _config(args)
    if args.random is not None:
        workload = random_workload(config, args.seed, args.random)
    elif args.workload:
        try:
            with open(args.workload) as fh:
                workload = parse_workload(fh.read())
        except OSError as exc:
            raise _InputError(f"cannot read workload: {exc}") from None
    else:
        raise _InputError("give a workload file or --random N")
    try:
        prealloc = parse_prealloc(args.prealloc, config)
    except ValueError:
        raise _InputError(f"bad --prealloc spec {args.prealloc!r}") from None
    sim = PipelineSim(config, PlacementPolicy(args.policy, args.seed), prealloc=prealloc,
                      mux=args.mux, audit=args.audit)
    try:
        metrics = sim.run(workload, args.ticks)
        sim.rtree.tree.check()
    except (StructuralError, AssertionError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    _emit(args, metrics.report() + "\n")
    if metrics.spurious_failures > 0:
        print(f"spurious failures: {metrics.spurious_failures}", file=sys.stderr)
        return EXIT_INVARIANT
    if sim.audit_violations():
        print(f"stage locality violated: {sim.audit_violations()[:3]}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomalloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", help="apply a trace and print stats")
    _common(p)
    p.add_argument("trace")
    p.add_argument("--series", action="store_true", help="include per-op bytes_allocated")
    p.add_argument("--check-every-op", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("demo", help="print a worked example")
    p.add_argument("figure", metavar="{" + ",".join(DEMOS) + "}")
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("fuzz", help="differential fuzzing against the byte model")
    _common(p)
    p.add_argument("--ops", type=int, default=10_000)
    p.add_argument("--emit", metavar="PATH", help="write the generated trace")
    p.add_argument("--sweep", action="store_true",
                   help="cycle through m in 0..4 and w in 1..3 in equal segments")
    p.add_argument("--counterexample", default="counterexample.trace", metavar="PATH")
    p.add_argument("--mutant", choices=MUTANTS, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("pipeline", help="run the pipeline model on a workload")
    _common(p)
    p.add_argument("workload", nargs="?")
    p.add_argument("--random", type=int, metavar="N", help="generate N random requests instead")
    p.add_argument("--ticks", type=int, default=1_000_000)
    p.add_argument("--prealloc", metavar="SPEC")
    p.add_argument("--mux", choices=("round-robin", "workload-first"), default="round-robin")
    p.add_argument("--audit", action="store_true", help="check stage locality")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except TraceError as exc:
        print(f"invalid trace: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
