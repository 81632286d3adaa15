import random

import pytest
from hypothesis import HealthCheck, settings, strategies as st

from geomalloc.core import BlockTree, GeometryConfig
from geomalloc.rtree import OutOfMemory, PlacementPolicy, _refresh, alloc_block, free_block

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def build_tree(config: GeometryConfig, leaves) -> BlockTree:
    """Tree whose leaves are exactly ``leaves`` ((level, index) pairs)."""
    tree = BlockTree(config)
    for level, index in leaves:
        tree.insert_leaf(level, index)
    _refresh(tree, list(leaves))
    return tree


def figure_tree(counter_bits: int = 2) -> BlockTree:
    """Allocated 0-3, 4-5 and C-F in a 16-byte space."""
    return build_tree(GeometryConfig(4, 0, counter_bits), [(2, 0), (1, 2), (2, 3)])


def random_tree(config: GeometryConfig, seed: int, ops: int = 40) -> BlockTree:
    rng = random.Random(seed)
    tree = BlockTree(config)
    policy = PlacementPolicy("random", seed)
    live = []
    for _ in range(ops):
        if live and rng.random() < 0.4:
            base, level = live.pop(rng.randrange(len(live)))
            free_block(tree, base, level)
        else:
            level = rng.randint(config.min_level, config.height_bits)
            try:
                live.append((alloc_block(tree, level, policy), level))
            except OutOfMemory:
                pass
    return tree


@st.composite
def configs(draw, max_bits: int = 7):
    n = draw(st.integers(1, max_bits))
    m = draw(st.integers(0, min(n, 2)))
    w = draw(st.integers(1, 3))
    return GeometryConfig(n, m, w)


@st.composite
def trees(draw, max_bits: int = 7):
    config = draw(configs(max_bits))
    seed = draw(st.integers(0, 2**32 - 1))
    ops = draw(st.integers(0, 60))
    return random_tree(config, seed, ops)


def free_byte_set(tree: BlockTree) -> set:
    out = set()
    for level, index in tree.niches():
        out.update(range(index << level, (index + 1) << level))
    return out


@pytest.fixture
def fig_tree():
    return figure_tree()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
