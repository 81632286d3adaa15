import pytest
from hypothesis import given, strategies as st

from geomalloc.trace import (TraceError, format_op, format_workload, parse_trace,
                             parse_workload)


def test_all_ops():
    text = """# comment
alloc a 12
free a
vspace v doubling 0
vspace w fixed 11
vspace p paging:4 256
access v 0x10
vdestroy v
"""
    ops = [op for _, op in parse_trace(text)]
    assert ops[0] == ("alloc", "a", 12)
    assert ops[1] == ("free", "a")
    assert ops[2][2].kind == "doubling"
    assert ops[3][2].kind == "fixed_ledged" and ops[3][2].size == 11
    assert ops[4][2].page_level == 4
    assert ops[5] == ("access", "v", 16)
    assert ops[6] == ("vdestroy", "v")
    assert [format_op(op) for op in ops][:2] == ["alloc a 12", "free a"]


def test_line_numbers_kept():
    assert [ln for ln, _ in parse_trace("\n\nalloc a 1\n# x\nfree a\n")] == [3, 5]


@pytest.mark.parametrize("line", ["alloc a", "alloc a b", "frob a", "vspace v weird 3",
                                  "access v", "free", "@tick 3"])
def test_malformed(line):
    with pytest.raises(TraceError) as err:
        parse_trace("alloc ok 1\n" + line + "\n")
    assert err.value.lineno == 2


def test_workload_ticks():
    wl = parse_workload("alloc a 1\n@tick 5\nalloc b 2\nfree a\n@tick 9\nfree b\n")
    assert [t for t, _ in wl] == [0, 5, 5, 9]
    assert parse_workload(format_workload(wl)) == wl


@pytest.mark.parametrize("bad", ["@tick", "@tick x", "@tick 1 2"])
def test_bad_directive(bad):
    with pytest.raises(TraceError):
        parse_workload(bad + "\n")


tags = st.text("abcxyz0123", min_size=1, max_size=5)
ops = st.one_of(
    st.tuples(st.just("alloc"), tags, st.integers(1, 10**6)),
    st.tuples(st.just("free"), tags),
    st.tuples(st.just("access"), tags, st.integers(0, 10**6)),
    st.tuples(st.just("vdestroy"), tags),
)


@given(st.lists(ops, max_size=30))
def test_format_parse_round_trip(items):
    text = "".join(format_op(op) + "\n" for op in items)
    assert [op for _, op in parse_trace(text)] == items
