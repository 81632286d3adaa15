"""Trace grammar shared by replay, fuzz output and pipeline workloads.

One op per line::

    alloc <tag> <size>
    free <tag>
    vspace <tag> <doubling|fixed|paging:<bits>> <size>
    vdestroy <tag>
    access <tag> <offset>

``#`` starts a comment.  Workload files may also carry ``@tick <t>``
lines; every op after one is injected at tick ``t``.  Numbers accept
``0x`` prefixes.
"""

from __future__ import annotations

import re

from .vtree import PopulationStrategy

__all__ = ["TraceError", "WorkloadError", "parse_strategy", "parse_op", "parse_trace",
           "parse_workload", "format_op", "format_workload"]


class TraceError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


WorkloadError = TraceError

_STRATEGY = re.compile(r"^(doubling|fixed|paging:(\d+))$")


def parse_strategy(text: str, size: int) -> PopulationStrategy:
    match = _STRATEGY.match(text)
    if match is None:
        raise ValueError(f"unknown strategy {text!r}")
    if text == "doubling":
        return PopulationStrategy.doubling()
    if text == "fixed":
        return PopulationStrategy.fixed_ledged(max(size, 1))
    return PopulationStrategy.fixed_paging(int(match.group(2)))


def parse_op(parts: list, lineno: int) -> tuple:
    """One trace line (already split) to an op tuple."""
    def number(text):
        try:
            return int(text, 0)
        except ValueError:
            raise TraceError(lineno, f"expected a number, got {text!r}") from None

    kind = parts[0]
    if kind == "alloc" and len(parts) == 3:
        return ("alloc", parts[1], number(parts[2]))
    if kind == "free" and len(parts) == 2:
        return ("free", parts[1])
    if kind == "vspace" and len(parts) == 4:
        size = number(parts[3])
        try:
            strategy = parse_strategy(parts[2], size)
        except ValueError as exc:
            raise TraceError(lineno, str(exc)) from None
        return ("vspace", parts[1], strategy, size)
    if kind == "vdestroy" and len(parts) == 2:
        return ("vdestroy", parts[1])
    if kind == "access" and len(parts) == 3:
        return ("access", parts[1], number(parts[2]))
    raise TraceError(lineno, f"malformed op {' '.join(parts)!r}")


def parse_workload(text: str) -> list:
    """Trace lines plus ``@tick <t>`` directives -> ``[(tick, op), ...]``."""
    tick = 0
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "@tick":
            if len(parts) != 2 or not parts[1].isdigit():
                raise TraceError(lineno, f"bad directive {line!r}")
            tick = int(parts[1])
            continue
        out.append((tick, parse_op(parts, lineno)))
    return out


def format_workload(workload: list) -> str:
    lines = []
    current = None
    for tick, op in workload:
        if tick != current:
            lines.append(f"@tick {tick}")
            current = tick
        lines.append(format_op(op))
    return "\n".join(lines) + "\n"


def parse_trace(text: str) -> list:
    """Plain trace -> ``[(lineno, op), ...]``; tick directives are rejected."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0].startswith("@"):
            raise TraceError(lineno, f"directive {parts[0]!r} is only valid in workloads")
        out.append((lineno, parse_op(parts, lineno)))
    return out


def format_op(op: tuple) -> str:
    kind = op[0]
    if kind == "alloc":
        return f"alloc {op[1]} {op[2]}"
    if kind in ("free", "vdestroy"):
        return f"{kind} {op[1]}"
    if kind == "vspace":
        strategy = op[2]
        name = {"doubling": "doubling", "fixed_ledged": "fixed"}.get(
            strategy.kind, f"paging:{strategy.page_level}")
        return f"vspace {op[1]} {name} {op[3]}"
    return f"access {op[1]} {op[2]}"
