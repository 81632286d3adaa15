"""Discrete-tick model of pipelined rtree and vtree hardware.

Every tree level is one pipeline stage with a descending and an ascending
lane; each lane slot holds one request per tick and a request moves one
level per tick.  A stage only touches node state of its own level and the
level below (checked by the audit log when enabled).

Reservations.  An alloc decides its niche level at admission, then on the
way down records the exact change it will make to each node it enters
(one niche of the chosen level gone, one residue niche on every level
between it and the request).  Later requests read niche maps through
those pending changes, so they decide as if every earlier alloc had
already finished.  On the way up each stage recomputes its node from the
children and drops the changes the children now account for.  A counter
that is saturated and has pending consumption is ambiguous; the reader
stalls until it resolves instead of guessing.

Deallocs change structure only on the way up.  An alloc whose choice of
niche level could be affected by an in-flight dealloc (the dealloc's level
is at or below the alloc's niche level) waits at admission.
"""

from __future__ import annotations

import json
import random
import sys
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional

from .core import BlockTree, GeometryConfig, Node
from .rtree import PlacementPolicy, _refresh, alloc_block, free_block, OutOfMemory, ledge_decompose
from .trace import WorkloadError, format_workload, parse_workload
from .vtree import AccessResult, PopulationStrategy, VirtualSpace

__all__ = [
    "PipelineRequest", "StageId", "ReservationLedger", "PreallocQueue", "SimMetrics",
    "PipelineSim", "parse_workload", "format_workload", "random_workload", "WorkloadError",
    "serializations_match",
]


@dataclass
class PipelineRequest:
    """One request as admitted to a pipeline.

    ``kind`` is alloc, dealloc, vcreate, vdestroy or vtranslate.
    """

    kind: str
    tag: str
    level: Optional[int] = None
    base: Optional[int] = None
    strategy: Optional[PopulationStrategy] = None
    size: Optional[int] = None
    handle: Optional[int] = None
    offset: Optional[int] = None
    admit_tick: Optional[int] = None


@dataclass(frozen=True)
class StageId:
    pipeline: str
    level: int


class ReservationLedger:
    """Per-level count of niches claimed by in-flight allocs."""

    def __init__(self, height_bits: int):
        self.counts = [0] * (height_bits + 1)
        self.lifted = 0
        self.made = 0

    def reserve(self, level: int) -> None:
        self.counts[level] += 1
        self.made += 1

    def lift(self, level: int) -> None:
        if self.counts[level] <= 0:
            raise AssertionError(f"reservation at level {level} lifted twice")
        self.counts[level] -= 1
        self.lifted += 1

    def outstanding(self) -> int:
        return sum(self.counts)


class PreallocQueue:
    """Real blocks of one level allocated ahead of need.

    Blocks fetched for a request that is already waiting go to ``handoff``
    and never count against ``depth``.
    """

    def __init__(self, level: int, depth: int):
        self.level = level
        self.depth = depth
        self.blocks: deque = deque()
        self.handoff: deque = deque()
        self.demand = 0
        self.in_flight = 0

    def take(self) -> Optional[int]:
        if self.handoff:
            return self.handoff.popleft()
        if self.blocks:
            return self.blocks.popleft()
        return None

    def wanted(self) -> int:
        have = len(self.blocks) + len(self.handoff) + self.in_flight
        return max(0, self.depth + self.demand - have)

    def deliver(self, base: int) -> None:
        self.in_flight -= 1
        if self.demand > len(self.handoff):
            self.handoff.append(base)
        elif len(self.blocks) < self.depth:
            self.blocks.append(base)
        else:
            self.handoff.append(base)


@dataclass
class SimMetrics:
    ticks: int = 0
    completed: int = 0
    rejected: int = 0
    stalled_ticks: int = 0
    spurious_failures: int = 0
    invalid_ops: int = 0
    traps: int = 0
    backing_failures: int = 0
    refills: int = 0
    max_in_flight: int = 0
    undrained: int = 0
    queue_occupancy: dict = field(default_factory=dict)

    def report(self) -> str:
        """Single JSON object; key order is fixed."""
        data = {
            "ticks": self.ticks,
            "completed": self.completed,
            "rejected": self.rejected,
            "stalled_ticks": self.stalled_ticks,
            "spurious_failures": self.spurious_failures,
            "invalid_ops": self.invalid_ops,
            "traps": self.traps,
            "backing_failures": self.backing_failures,
            "refills": self.refills,
            "max_in_flight": self.max_in_flight,
            "undrained": self.undrained,
            "queue_occupancy": {
                str(level): {str(k): v for k, v in sorted(hist.items())}
                for level, hist in sorted(self.queue_occupancy.items())
            },
        }
        return json.dumps(data, indent=2)


class _Flight:
    __slots__ = ("req", "tag", "kind", "stage", "down", "acted", "bottom", "level", "index",
                 "q", "delta", "split", "chain", "result", "error", "admit", "complete",
                 "stalls", "space", "target", "created", "need", "owner", "pieces")

    def __init__(self, req: PipelineRequest, tick: int, top: int):
        self.req = req
        self.tag = req.tag
        self.kind = req.kind
        self.stage = top
        self.down = True
        self.acted = False
        self.bottom = False
        self.level = req.level
        self.index = 0
        self.q = None
        self.delta = None
        self.split = False
        self.chain = True
        self.result = None
        self.error = None
        self.admit = tick
        self.complete = None
        self.stalls = 0
        self.space = None
        self.target = None
        self.created = []
        self.need = None
        self.owner = None
        self.pieces = None


class _Lanes:
    """Down and up lane slots of one pipeline."""

    def __init__(self, top: int):
        self.top = top
        self.down: dict[int, _Flight] = {}
        self.up: dict[int, _Flight] = {}

    def idle(self) -> bool:
        return not self.down and not self.up

    def flights(self):
        return list(self.down.values()) + list(self.up.values())

    def act(self, act_down, act_up) -> int:
        """Run each stage's action once per arrival; returns stall count."""
        stalls = 0
        for level in sorted(self.up, reverse=True):
            flight = self.up[level]
            if not flight.acted:
                act_up(flight)
                flight.acted = True
        for level in sorted(self.down):
            flight = self.down.get(level)
            if flight is None or flight.acted:
                continue
            if act_down(flight):
                flight.acted = True
            elif flight.error is None:
                flight.stalls += 1
                stalls += 1
        return stalls

    def move(self) -> tuple:
        """Advance acted flights; returns (finished flights, blocked count)."""
        finished = []
        blocked = 0
        for level in sorted(self.up, reverse=True):
            flight = self.up[level]
            if not flight.acted:
                continue
            if level == self.top:
                del self.up[level]
                finished.append(flight)
            elif level + 1 not in self.up:
                del self.up[level]
                self.up[level + 1] = flight
                flight.stage = level + 1
                flight.acted = False
            else:
                flight.stalls += 1
                blocked += 1
        for level in sorted(self.down):
            flight = self.down[level]
            if flight.error is not None:
                del self.down[level]
                finished.append(flight)
                continue
            if not flight.acted:
                continue
            if flight.bottom:
                if level == self.top:
                    del self.down[level]
                    finished.append(flight)
                elif level + 1 not in self.up:
                    del self.down[level]
                    self.up[level + 1] = flight
                    flight.stage = level + 1
                    flight.down = False
                    flight.acted = False
                else:
                    flight.stalls += 1
                    blocked += 1
            elif level - 1 not in self.down:
                del self.down[level]
                self.down[level - 1] = flight
                flight.stage = level - 1
                flight.acted = False
            else:
                flight.stalls += 1
                blocked += 1
        return finished, blocked


class _Audit:
    def __init__(self):
        self.records: list = []
        self.current = None

    def begin(self, pipeline: str, stage: int):
        self.current = (pipeline, stage, set())

    def touch(self, level: int):
        if self.current is not None:
            self.current[2].add(level)

    def end(self):
        if self.current is not None:
            self.records.append(self.current)
        self.current = None

    def violations(self) -> list:
        return [(p, s, sorted(t)) for p, s, t in self.records if not t <= {s, s - 1}]


class _NoAudit:
    records: list = []

    def begin(self, pipeline, stage):
        pass

    def touch(self, level):
        pass

    def end(self):
        pass

    def violations(self):
        return []


class _RtreePipeline:
    def __init__(self, config: GeometryConfig, policy: PlacementPolicy, audit):
        self.config = config
        self.policy = policy
        self.tree = BlockTree(config)
        self.pend: list[dict] = [dict() for _ in range(config.height_bits + 1)]
        self.lanes = _Lanes(config.height_bits)
        self.ledger = ReservationLedger(config.height_bits)
        self.audit = audit
        self.spurious = 0

    # -- reading through reservations ----------------------------------------

    def _node(self, level: int, index: int) -> Optional[Node]:
        self.audit.touch(level)
        return self.tree.levels[level].get(index)

    def effective(self, level: int, index: int, q: int) -> Optional[int]:
        """Niche count at level ``q`` under a node once in-flight allocs land.

        Exact below saturation; a positive lower bound at saturation; None
        when saturation hides whether anything is left.
        """
        node = self._node(level, index)
        if node.leaf:
            return 0
        count = node.map[level - 1 - q]
        entries = self.pend[level].get(index)
        change = 0
        if entries:
            for delta, _ in entries.values():
                change += delta.get(q, 0)
        sat = self.config.saturation
        if count < sat:
            value = count + change
            if value < 0:
                raise AssertionError(f"negative availability at L{level} I{index} q={q}")
            return value
        if sat + change > 0:
            return sat + change
        return None

    def _reserve_at(self, level: int, index: int, flight: _Flight) -> None:
        self.audit.touch(level)
        self.pend[level].setdefault(index, {})[flight.tag] = [flight.delta, None]

    def _set_via(self, level: int, index: int, flight: _Flight, side: int) -> None:
        self.audit.touch(level)
        entries = self.pend[level].get(index)
        if entries and flight.tag in entries:
            entries[flight.tag][1] = side

    def _absorb(self, level: int, index: int) -> None:
        entries = self.pend[level].get(index)
        if not entries:
            return
        below = self.tree.levels[level - 1]
        below_pend = self.pend[level - 1]
        for tag in list(entries):
            via = entries[tag][1]
            if via is None:
                continue
            child = index << 1 | via
            self.audit.touch(level - 1)
            if child in below and tag not in below_pend.get(child, ()):
                del entries[tag]
        if not entries:
            del self.pend[level][index]

    def _recompute(self, level: int, index: int) -> None:
        self.audit.touch(level)
        self.audit.touch(level - 1)
        self.tree.recompute(level, index)
        self._absorb(level, index)

    def _split_map(self, level: int, leaf_level: int) -> tuple:
        m = self.config.min_level
        return tuple(1 if leaf_level <= lvl else 0 for lvl in range(level - 1, m - 1, -1))

    def _create(self, level: int, index: int, leaf_level: int) -> None:
        """Create a node on a split path with the map it will end up with."""
        self.audit.touch(level)
        if level == leaf_level:
            node = Node(leaf=True, map=self.config.zero_map(level))
        else:
            node = Node(map=self._split_map(level, leaf_level))
            node.set_child(self.policy.end(), True)
        self.tree.levels[level][index] = node
        if level < self.config.height_bits:
            self.audit.touch(level + 1)
            self.tree.levels[level + 1][index >> 1].set_child(index & 1, True)

    # -- admission -----------------------------------------------------------

    def in_flight_deallocs(self):
        return [f for f in self.lanes.flights() if f.kind == "dealloc"]

    def try_admit(self, req: PipelineRequest, tick: int) -> tuple:
        """Returns ('admit', flight) | ('stall', None) | ('reject', None)."""
        n = self.config.height_bits
        if self.lanes.down.get(n) is not None:
            return "busy", None
        if req.kind == "dealloc":
            flight = _Flight(req, tick, n)
            flight.index = req.base >> n
            self.lanes.down[n] = flight
            return "admit", flight
        level = req.level
        self.audit.begin("rtree", n)
        try:
            root = self._node(n, 0)
            q = None
            if root is None:
                q = n
            elif not root.leaf:
                for j in range(level, n):
                    value = self.effective(n, 0, j)
                    if value is None:
                        return "stall", None
                    if value > 0:
                        q = j
                        break
            deallocs = self.in_flight_deallocs()
            if q is None:
                return ("stall", None) if deallocs else ("reject", None)
            if any(d.level <= q for d in deallocs):
                return "stall", None
            flight = _Flight(req, tick, n)
            flight.q = q
            delta = {q: -1}
            for j in range(level, q):
                delta[j] = 1
            flight.delta = delta
            if q == n:
                flight.split = True
            else:
                self._reserve_at(n, 0, flight)
            self.ledger.reserve(q)
            self.lanes.down[n] = flight
            return "admit", flight
        finally:
            self.audit.end()

    # -- stage actions -------------------------------------------------------

    def act_down(self, flight: _Flight) -> bool:
        self.audit.begin("rtree", flight.stage)
        try:
            if flight.kind == "alloc":
                return self._alloc_down(flight)
            return self._dealloc_down(flight)
        finally:
            self.audit.end()

    def act_up(self, flight: _Flight) -> None:
        self.audit.begin("rtree", flight.stage)
        try:
            if flight.kind == "alloc":
                self._recompute(flight.stage, flight.index >> (flight.stage - flight.level))
            else:
                self._dealloc_up(flight)
        finally:
            self.audit.end()

    def _alloc_down(self, flight: _Flight) -> bool:
        k = flight.stage
        idx = flight.index
        leaf_level = flight.level
        n = self.config.height_bits
        if flight.split:
            if k == n and self._node(n, 0) is None:
                self._create(n, 0, leaf_level)
            if k == leaf_level:
                flight.bottom = True
                flight.index = idx
                flight.result = idx << k
                return True
            node = self._node(k, idx)
            child = idx << 1 | (1 if node.right else 0)
            self._create(k - 1, child, leaf_level)
            flight.index = child
            return True

        q = flight.q
        sides = (0, 1) if self.policy.variant != "rightmost" else (1, 0)
        ok = {}
        ambiguous = False
        for side in sides:
            child = idx << 1 | side
            node = self._node(k - 1, child)
            if node is None:
                ok[side] = k - 1 == q
            elif node.leaf or k - 1 <= q:
                ok[side] = False
            else:
                value = self.effective(k - 1, child, q)
                if value is None:
                    ambiguous = True
                    if self.policy.variant != "random":
                        break
                    ok[side] = False
                else:
                    ok[side] = value > 0
            if ok.get(side) and self.policy.variant != "random":
                break
        if self.policy.variant == "random":
            if ambiguous:
                return False
            if not (ok[0] or ok[1]):
                return self._spurious(flight)
            side = self.policy.pick(ok[0], ok[1])
        else:
            chosen = [s for s in sides if ok.get(s)]
            if not chosen:
                if ambiguous:
                    return False
                return self._spurious(flight)
            side = chosen[0]
        child = idx << 1 | side
        self._set_via(k, idx, flight, side)
        if self._node(k - 1, child) is None:
            flight.split = True
            self._create(k - 1, child, leaf_level)
        else:
            self._reserve_at(k - 1, child, flight)
        flight.index = child
        return True

    def _spurious(self, flight: _Flight) -> bool:
        self.spurious += 1
        flight.error = "spurious"
        for level in range(self.config.height_bits + 1):
            for index in list(self.pend[level]):
                self.pend[level][index].pop(flight.tag, None)
                if not self.pend[level][index]:
                    del self.pend[level][index]
        self.ledger.lift(flight.q)
        return False

    def _dealloc_down(self, flight: _Flight) -> bool:
        k = flight.stage
        idx = flight.req.base >> k
        node = self._node(k, idx)
        if node is None or (k > flight.level and node.leaf) or (k == flight.level and not node.leaf):
            flight.error = "invalid"
            return False
        if k == flight.level:
            flight.bottom = True
            if k == self.config.height_bits:
                del self.tree.levels[k][idx]
        return True

    def _dealloc_up(self, flight: _Flight) -> None:
        k = flight.stage
        idx = flight.req.base >> k
        node = self._node(k, idx)
        if flight.chain:
            child = flight.req.base >> (k - 1)
            self.audit.touch(k - 1)
            if self.pend[k - 1].get(child):
                raise AssertionError(f"coalescing L{k - 1} I{child} with reservations pending")
            del self.tree.levels[k - 1][child]
            node.set_child(child & 1, False)
            if not (node.left or node.right):
                if self.pend[k].get(idx):
                    raise AssertionError(f"emptied L{k} I{idx} still holds reservations")
                if k == self.config.height_bits:
                    del self.tree.levels[k][idx]
                return
            flight.chain = False
        self._recompute(k, idx)

    def step(self) -> tuple:
        stalls = self.lanes.act(self.act_down, self.act_up)
        finished, blocked = self.lanes.move()
        for flight in finished:
            if flight.kind == "alloc" and flight.error is None:
                self.ledger.lift(flight.q)
        return finished, stalls + blocked


class PipelineSim:
    """rtree and vtree pipelines joined by per-level preallocation queues.

    ``prealloc`` maps level -> queue depth; the two highest levels are
    never preallocated.  ``mux`` is ``round-robin`` or ``workload-first``.
    ``max_in_flight`` caps concurrent rtree requests (None = no cap).
    """

    def __init__(self, config: GeometryConfig, policy: Optional[PlacementPolicy] = None,
                 prealloc: Optional[dict] = None, mux: str = "round-robin",
                 max_in_flight: Optional[int] = None, audit: bool = False):
        if mux not in ("round-robin", "workload-first"):
            raise ValueError(f"unknown multiplexer policy {mux!r}")
        self.config = config
        self.policy = policy or PlacementPolicy()
        self.audit = _Audit() if audit else _NoAudit()
        self.rtree = _RtreePipeline(config, self.policy, self.audit)
        self.vlanes = _Lanes(config.height_bits)
        n, m = config.height_bits, config.min_level
        self.queues = {}
        for level in range(m, n + 1):
            depth = (prealloc or {}).get(level, 0)
            self.queues[level] = PreallocQueue(level, 0 if level >= n - 1 else depth)
        self.mux = mux
        self.max_in_flight = max_in_flight
        self.tick_count = 0
        self.metrics = SimMetrics()
        self.spaces: dict[int, VirtualSpace] = {}
        self._next_handle = 1
        self.rtree_log: list = []
        self.live_allocs: dict[str, tuple] = {}
        self.pending_tags: set = set()
        self.space_tags: dict[str, int] = {}
        self.pending_spaces: set = set()
        self.dead_tags: set = set()
        self.failed_tags: set = set()
        self.results: dict[str, object] = {}
        self._wl_rtree: deque = deque()
        self._wl_vtree: deque = deque()
        self._frees: deque = deque()
        self._rr = 0
        self._refill_serial = 0
        self._schedule: list = []
        self._draining = False

    # -- workload intake -----------------------------------------------------

    def submit(self, op: tuple, tick: int = 0) -> None:
        """Queue a trace op (tuple as produced by :func:`parse_workload`)."""
        self._schedule.append((tick, len(self._schedule), op))

    def _inject(self) -> None:
        if not self._schedule:
            return
        self._schedule.sort(key=lambda t: (t[0], t[1]))
        while self._schedule and self._schedule[0][0] <= self.tick_count:
            _, _, op = self._schedule.pop(0)
            if op[0] in ("alloc", "free"):
                self._wl_rtree.append(op)
            else:
                self._wl_vtree.append(op)

    # -- rtree admission through the multiplexer ------------------------------

    def _level_for(self, size: int) -> int:
        return max(self.config.min_level, (size - 1).bit_length())

    def _workload_candidate(self):
        while self._wl_rtree:
            op = self._wl_rtree[0]
            if op[0] == "alloc":
                _, tag, size = op
                if tag in self.live_allocs or tag in self.pending_tags:
                    self._wl_rtree.popleft()
                    self.metrics.invalid_ops += 1
                    continue
                if not 1 <= size <= self.config.size:
                    self._wl_rtree.popleft()
                    self.metrics.invalid_ops += 1
                    continue
                return PipelineRequest("alloc", tag, level=self._level_for(size))
            _, tag = op
            if tag in self.pending_tags:
                return None
            if tag not in self.live_allocs:
                self._wl_rtree.popleft()
                self.metrics.invalid_ops += 1
                continue
            base, level = self.live_allocs[tag]
            return PipelineRequest("dealloc", tag, level=level, base=base)
        return None

    def _sources(self) -> list:
        return ["workload", "free"] + [f"refill:{lvl}" for lvl in sorted(self.queues)]

    def _candidate(self, source: str):
        if source == "workload":
            return self._workload_candidate()
        if source == "free":
            if self._frees:
                base, level, tag = self._frees[0]
                return PipelineRequest("dealloc", tag, level=level, base=base)
            return None
        level = int(source.split(":")[1])
        queue = self.queues[level]
        if queue.wanted() > 0:
            self._refill_serial += 1
            return PipelineRequest("alloc", f"~refill{level}.{self._refill_serial}", level=level)
        return None

    def _rtree_in_flight(self) -> int:
        return len(self.rtree.lanes.down) + len(self.rtree.lanes.up)

    def _admit_rtree(self, tick: int) -> None:
        n = self.config.height_bits
        if n in self.rtree.lanes.down:
            return
        if self.max_in_flight is not None and self._rtree_in_flight() >= self.max_in_flight:
            return
        sources = self._sources()
        if self.mux == "workload-first":
            order = sources
        else:
            order = sources[self._rr:] + sources[:self._rr]
        for source in order:
            req = self._candidate(source)
            if req is None:
                continue
            req.admit_tick = tick
            outcome, flight = self.rtree.try_admit(req, tick)
            if outcome == "stall":
                self.metrics.stalled_ticks += 1
                continue
            if outcome == "busy":
                return
            self._rr = (sources.index(source) + 1) % len(sources)
            if source == "workload":
                self._wl_rtree.popleft()
            elif source == "free":
                self._frees.popleft()
            if outcome == "reject":
                self._rtree_finished_reject(req, source, tick)
                return
            if source.startswith("refill"):
                flight.owner = int(source.split(":")[1])
                self.queues[flight.owner].in_flight += 1
                self.metrics.refills += 1
            elif source == "workload":
                self.live_allocs.pop(req.tag, None)
                self.pending_tags.add(req.tag)
            return

    def _rtree_finished_reject(self, req, source, tick) -> None:
        self.rtree_log.append({"tag": req.tag, "kind": req.kind, "level": req.level,
                               "base": None, "admit": tick, "complete": tick})
        if source.startswith("refill"):
            level = int(source.split(":")[1])
            queue = self.queues[level]
            if queue.demand > 0:
                self._fail_backing(level)
            return
        self.metrics.rejected += 1
        self.failed_tags.add(req.tag)
        self.results[req.tag] = "oom"

    def _rtree_finished(self, flight: _Flight) -> None:
        tick = self.tick_count
        req = flight.req
        if flight.error == "spurious":
            self.metrics.spurious_failures += 1
            self.pending_tags.discard(req.tag)
            return
        if flight.error == "invalid":
            self.metrics.invalid_ops += 1
            self.pending_tags.discard(req.tag)
            return
        base = flight.result if req.kind == "alloc" else req.base
        self.rtree_log.append({"tag": req.tag, "kind": req.kind, "level": req.level,
                               "base": base, "admit": flight.admit, "complete": tick})
        if flight.owner is not None:
            self.queues[flight.owner].deliver(base)
            return
        if req.tag.startswith("~"):
            return
        self.pending_tags.discard(req.tag)
        self.metrics.completed += 1
        if req.kind == "alloc":
            self.live_allocs[req.tag] = (base, req.level)
            self.results[req.tag] = base

    # -- vtree pipeline ------------------------------------------------------

    def _vtree_candidate(self):
        while self._wl_vtree:
            op = self._wl_vtree[0]
            kind, tag = op[0], op[1]
            if kind == "vspace":
                if tag in self.space_tags or tag in self.pending_spaces:
                    self._wl_vtree.popleft()
                    self.metrics.invalid_ops += 1
                    continue
                return op
            if tag in self.pending_spaces:
                return None
            if tag not in self.space_tags:
                self._wl_vtree.popleft()
                self.metrics.invalid_ops += 1
                continue
            if kind == "vdestroy":
                handle = self.space_tags[tag]
                busy = any(f.req.handle == handle for f in self.vlanes.flights())
                if busy:
                    self.metrics.stalled_ticks += 1
                    return None
            return op
        return None

    def _admit_vtree(self, tick: int) -> None:
        n = self.config.height_bits
        if n in self.vlanes.down:
            return
        op = self._vtree_candidate()
        if op is None:
            return
        self._wl_vtree.popleft()
        kind, tag = op[0], op[1]
        if kind == "vspace":
            strategy, size = op[2], op[3]
            bad_page = strategy.kind == "fixed_paging" and not (
                self.config.min_level <= strategy.page_level <= self.config.height_bits)
            if bad_page or strategy.kind != "doubling" and not 1 <= size <= self.config.size:
                self.metrics.invalid_ops += 1
                return
            req = PipelineRequest("vcreate", tag, strategy=strategy, size=size, admit_tick=tick)
            handle = self._next_handle
            self._next_handle += 1
            bound = self.config.size if strategy.kind == "doubling" else size
            space = VirtualSpace(handle, strategy, bound, self.config)
            req.handle = handle
            flight = _Flight(req, tick, n)
            flight.space = space
            if strategy.kind == "fixed_ledged":
                plan = ledge_decompose(size, self.config)
                flight.pieces = {lvl: off >> lvl for lvl, off in plan.pieces}
                flight.level = min(flight.pieces)
            else:
                flight.level = n
            self.pending_spaces.add(tag)
        elif kind == "vdestroy":
            handle = self.space_tags[tag]
            req = PipelineRequest("vdestroy", tag, handle=handle, admit_tick=tick)
            flight = _Flight(req, tick, n)
            flight.space = self.spaces[handle]
        else:
            handle = self.space_tags[tag]
            space = self.spaces[handle]
            offset = op[2]
            req = PipelineRequest("vtranslate", tag, handle=handle, offset=offset, admit_tick=tick)
            if not 0 <= offset < space.bound:
                self.metrics.traps += 1
                self.metrics.completed += 1
                self.results[f"{tag}@{offset}"] = "trap"
                return
            flight = _Flight(req, tick, n)
            flight.space = space
        self.vlanes.down[n] = flight

    def _take_backing(self, flight: _Flight, level: int) -> Optional[int]:
        queue = self.queues[level]
        if flight.need != level:
            flight.need = level
            queue.demand += 1
        base = queue.take()
        if base is None:
            return None
        queue.demand -= 1
        flight.need = None
        return base

    def _fail_backing(self, level: int) -> None:
        queue = self.queues[level]
        for flight in sorted(self.vlanes.flights(), key=lambda f: f.admit):
            if flight.need == level and flight.error is None:
                queue.demand -= 1
                flight.need = None
                flight.error = "backing-failure"
                self.metrics.backing_failures += 1
                self._rollback(flight)
                return

    def _rollback(self, flight: _Flight) -> None:
        tree = flight.space.tree
        for level, index in reversed(flight.created):
            node = tree.levels[level].pop(index, None)
            if node is not None and node.back is not None:
                self._frees.append((node.back, level, f"~vfree{node.back}"))
            if level < self.config.height_bits:
                parent = tree.levels[level + 1].get(index >> 1)
                if parent is not None:
                    parent.set_child(index & 1, False)

    def _vnode_create(self, flight: _Flight, level: int, index: int, back=None) -> bool:
        tree = flight.space.tree
        self.audit.touch(level)
        if back is not None:
            node = Node(leaf=True, map=self.config.zero_map(level), full=True, back=back)
        else:
            node = Node(map=self.config.zero_map(level))
        tree.levels[level][index] = node
        flight.created.append((level, index))
        if level < self.config.height_bits:
            self.audit.touch(level + 1)
            tree.levels[level + 1][index >> 1].set_child(index & 1, True)
        return True

    def _v_act_down(self, flight: _Flight) -> bool:
        self.audit.begin("vtree", flight.stage)
        try:
            return self._v_down(flight)
        finally:
            self.audit.end()

    def _v_down(self, flight: _Flight) -> bool:
        k = flight.stage
        n = self.config.height_bits
        m = self.config.min_level
        space = flight.space
        tree = space.tree
        kind = flight.kind
        if kind == "vdestroy":
            for bid, node in list(space.leaves()):
                self._frees.append((node.back, bid.level, f"~vfree{node.back}"))
            del self.spaces[space.handle]
            del self.space_tags[flight.tag]
            flight.bottom = True
            return True
        if kind == "vcreate":
            pieces = flight.pieces
            if pieces is None:
                flight.bottom = True
                return True
            if k == n:
                self.audit.touch(n)
                if tree.levels[n].get(0) is None:
                    if n in pieces:
                        base = self._take_backing(flight, n)
                        if base is None:
                            return False
                        self._vnode_create(flight, n, 0, back=base)
                    else:
                        self._vnode_create(flight, n, 0)
            if k == flight.level:
                flight.bottom = True
                return True
            below = k - 1
            wanted = sorted({off >> below for lvl, off in
                             ((lvl, idx << lvl) for lvl, idx in pieces.items()) if lvl <= below})
            for index in wanted:
                self.audit.touch(below)
                if index in tree.levels[below]:
                    continue
                if below in pieces and pieces[below] == index:
                    base = self._take_backing(flight, below)
                    if base is None:
                        return False
                    self._vnode_create(flight, below, index, back=base)
                else:
                    self._vnode_create(flight, below, index)
            return True

        y = flight.req.offset
        if flight.target is None:
            self.audit.touch(k)
            node = tree.levels[k].get(y >> k)
            if node is not None and node.leaf:
                flight.bottom = True
                flight.result = AccessResult(node.back, k, y - ((y >> k) << k))
                return True
            if node is None:
                # only the root can be missing on a walk
                flight.target = self._v_target(space, y, m, None)
            else:
                child = tree.levels[k - 1].get(y >> (k - 1))
                self.audit.touch(k - 1)
                if child is not None:
                    return True
                sibling = tree.levels[k - 1].get((y >> (k - 1)) ^ 1)
                flight.target = self._v_target(space, y, m, (k - 1, sibling))
        t_level, t_index = flight.target
        if k == n and tree.levels[n].get(0) is None:
            if t_level == n:
                base = self._take_backing(flight, n)
                if base is None:
                    return False
                self._vnode_create(flight, n, 0, back=base)
                return True
            self._vnode_create(flight, n, 0)
        if k == t_level:
            node = tree.levels[k][y >> k]
            flight.bottom = True
            flight.result = AccessResult(node.back, k, y - ((y >> k) << k))
            return True
        below = k - 1
        index = y >> below
        self.audit.touch(below)
        if index in tree.levels[below]:
            return True
        if below == t_level:
            base = self._take_backing(flight, below)
            if base is None:
                return False
            self._vnode_create(flight, below, index, back=base)
        else:
            self._vnode_create(flight, below, index)
        return True

    def _v_target(self, space: VirtualSpace, y: int, m: int, sibling_info) -> tuple:
        strategy = space.strategy
        if strategy.kind == "fixed_paging":
            p = strategy.page_level
            return p, y >> p
        if sibling_info is not None:
            level, sibling = sibling_info
            if sibling is not None and sibling.full:
                return level, y >> level
        return m, y >> m

    def _v_act_up(self, flight: _Flight) -> None:
        self.audit.begin("vtree", flight.stage)
        try:
            k = flight.stage
            if flight.kind in ("vdestroy",):
                return
            tree = flight.space.tree
            if flight.kind == "vcreate":
                indices = list(tree.levels[k])
            else:
                indices = [flight.req.offset >> k]
            self.audit.touch(k)
            self.audit.touch(k - 1)
            below = tree.levels[k - 1]
            for index in indices:
                node = tree.levels[k].get(index)
                if node is None or node.leaf:
                    continue
                left = below.get(index << 1)
                right = below.get(index << 1 | 1)
                node.full = bool(left is not None and right is not None and left.full and right.full)
        finally:
            self.audit.end()

    def _vtree_finished(self, flight: _Flight) -> None:
        if flight.error is not None:
            if flight.kind == "vcreate":
                self.pending_spaces.discard(flight.tag)
            return
        self.metrics.completed += 1
        if flight.kind == "vcreate":
            self.pending_spaces.discard(flight.tag)
            self.spaces[flight.space.handle] = flight.space
            self.space_tags[flight.tag] = flight.space.handle
            self.results[flight.tag] = flight.space.handle
        elif flight.kind == "vtranslate":
            self.results[f"{flight.tag}@{flight.req.offset}"] = flight.result

    # -- driving -------------------------------------------------------------

    def busy(self) -> bool:
        return bool(self._schedule or self._wl_rtree or self._wl_vtree or self._frees
                    or not self.rtree.lanes.idle() or not self.vlanes.idle()
                    or any(q.wanted() or q.in_flight for q in self.queues.values()))

    def tick(self) -> None:
        tick = self.tick_count
        self._inject()
        self._admit_rtree(tick)
        self._admit_vtree(tick)
        finished, stalls = self.rtree.step()
        self.metrics.stalled_ticks += stalls
        for flight in finished:
            self._rtree_finished(flight)
        vstalls = self.vlanes.act(self._v_act_down, self._v_act_up)
        vfinished, vblocked = self.vlanes.move()
        self.metrics.stalled_ticks += vstalls + vblocked
        for flight in vfinished:
            self._vtree_finished(flight)
        in_flight = self._rtree_in_flight()
        self.metrics.max_in_flight = max(self.metrics.max_in_flight, in_flight)
        for level, queue in self.queues.items():
            if queue.depth:
                hist = self.metrics.queue_occupancy.setdefault(level, Counter())
                hist[len(queue.blocks)] += 1
        self.tick_count += 1
        self.metrics.ticks = self.tick_count

    def drain(self) -> None:
        """Stop refilling and hand every queued block back to the rtree."""
        self._draining = True
        for queue in self.queues.values():
            queue.depth = 0
            while queue.blocks:
                base = queue.blocks.popleft()
                self._frees.append((base, queue.level, f"~drain{base}"))

    def run(self, workload=(), max_ticks: int = 1_000_000) -> SimMetrics:
        for tick, op in workload:
            self.submit(op, tick)
        while self.tick_count < max_ticks:
            if not self.busy():
                if any(q.blocks for q in self.queues.values()):
                    self.drain()
                else:
                    break
            elif not (self._schedule or self._wl_rtree or self._wl_vtree) \
                    and self.vlanes.idle() and not self._draining:
                self.drain()
            self.tick()
        self.metrics.undrained = (len(self._schedule) + len(self._wl_rtree) + len(self._wl_vtree)
                                  + len(self.rtree.lanes.flights()) + len(self.vlanes.flights())
                                  + len(self._frees))
        self.metrics.spurious_failures = self.rtree.spurious
        return self.metrics

    def real_bytes_accounted(self) -> tuple:
        """(bytes allocated in the rtree, bytes owned by allocs, spaces and queues)."""
        allocated = sum(1 << bid.level for bid in self.rtree.tree.leaves())
        owned = sum(1 << level for _, level in self.live_allocs.values())
        for space in self.spaces.values():
            owned += space.backed_bytes()
        for queue in self.queues.values():
            owned += (len(queue.blocks) + len(queue.handoff)) << queue.level
        return allocated, owned

    def audit_violations(self) -> list:
        return self.audit.violations()


# -- workloads ---------------------------------------------------------------

def random_workload(config: GeometryConfig, seed: int, requests: int = 100,
                    max_gap: int = 3, free_ratio: float = 0.4) -> list:
    """Random rtree alloc/free workload with random admission ticks."""
    rng = random.Random(seed)
    n, m = config.height_bits, config.min_level
    live = []
    out = []
    tick = 0
    serial = 0
    for _ in range(requests):
        tick += rng.randint(0, max_gap)
        if live and rng.random() < free_ratio:
            tag = live.pop(rng.randrange(len(live)))
            out.append((tick, ("free", tag)))
        else:
            serial += 1
            tag = f"a{serial}"
            level = rng.randint(m, max(m, n - 2))
            size = rng.randint((1 << level) // 2 + 1, 1 << level) if level > m else rng.randint(1, 1 << m)
            out.append((tick, ("alloc", tag, size)))
            live.append(tag)
    return out


# -- linearizability ---------------------------------------------------------

def serializations_match(config: GeometryConfig, policy_variant: str, log: list,
                         final_tree: BlockTree, limit: int = 200_000) -> bool:
    """Is there a sequential order of ``log`` that reproduces every response?

    Orders respect real time: a request that completed before another was
    admitted comes first.  Each alloc must return the same base (or OOM)
    as in the pipelined run; the resulting tree must equal ``final_tree``.
    """
    if policy_variant not in ("leftmost", "rightmost"):
        raise ValueError("only deterministic policies have a unique sequential answer")
    policy = PlacementPolicy(policy_variant)
    entries = [e for e in log if not e["tag"].startswith("~") or e["base"] is not None]
    count = len(entries)
    done = [False] * count
    tree = BlockTree(config)
    budget = [limit]
    order_admit = sorted(range(count), key=lambda i: entries[i]["admit"])

    def ready(i):
        admit = entries[i]["admit"]
        for j in range(count):
            if not done[j] and j != i and entries[j]["complete"] < admit:
                return False
        return True

    def apply(i):
        e = entries[i]
        if e["kind"] == "alloc":
            try:
                base = alloc_block(tree, e["level"], policy)
            except OutOfMemory:
                return e["base"] is None, None
            if e["base"] is None or base != e["base"]:
                free_block(tree, base, e["level"])
                return False, None
            return True, ("free", base, e["level"])
        node = tree.get(e["level"], e["base"] >> e["level"])
        if node is None or not node.leaf:
            return False, None
        free_block(tree, e["base"], e["level"])
        return True, ("alloc", e["base"], e["level"])

    def undo(action):
        kind, base, level = action
        if kind == "free":
            free_block(tree, base, level)
        else:
            tree.insert_leaf(level, base >> level)
            _refresh(tree, [(level, base >> level)])

    def search(placed):
        if placed == count:
            return tree == final_tree
        budget[0] -= 1
        if budget[0] < 0:
            raise RuntimeError("serialization search budget exhausted")
        tried = 0
        for i in order_admit:
            if done[i]:
                continue
            if entries[i]["admit"] > min(entries[j]["complete"] for j in range(count) if not done[j]):
                break
            if not ready(i):
                continue
            tried += 1
            ok, action = apply(i)
            if not ok:
                continue
            done[i] = True
            if search(placed + 1):
                return True
            done[i] = False
            if action is not None:
                undo(action)
        return False

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, count * 4 + 100))
    try:
        return search(0)
    finally:
        sys.setrecursionlimit(old_limit)
