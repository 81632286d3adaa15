import pytest
from hypothesis import given, strategies as st

from geomalloc.core import (BlockId, BlockTree, GeometryConfig, Node, StructuralError,
                            combine_niche_maps, dumps, loads, parse_rendering, render_tree,
                            semantic_content, true_niche_counts)

from conftest import build_tree, figure_tree, trees


class TestGeometry:
    @pytest.mark.parametrize("n,m,w", [(4, 5, 2), (49, 0, 2), (8, 0, 0), (8, 0, 17), (-1, 0, 1)])
    def test_rejects_bad_config(self, n, m, w):
        with pytest.raises(ValueError):
            GeometryConfig(n, m, w)

    def test_derived_sizes(self):
        cfg = GeometryConfig(16, 4, 3)
        assert cfg.size == 65536
        assert cfg.saturation == 7
        assert cfg.map_length(10) == 6

    def test_block_id_alignment(self):
        assert BlockId.at(0xC, 2) == BlockId(2, 3)
        assert BlockId(2, 3).base == 12 and BlockId(2, 3).size == 4
        with pytest.raises(StructuralError):
            BlockId.at(6, 2)


class TestCombine:
    cfg = GeometryConfig(4, 0, 2)

    def test_both_present(self):
        assert combine_niche_maps((0, 0), (1, 0), 2, self.cfg) == (0, 1, 0)

    def test_right_missing(self):
        assert combine_niche_maps((0, 0), None, 2, self.cfg) == (1, 0, 0)

    def test_root_of_figure(self):
        assert combine_niche_maps((0, 1, 0), (1, 0, 0), 3, self.cfg) == (0, 1, 1, 0)

    def test_saturates(self):
        assert combine_niche_maps((3,), (1,), 1, self.cfg) == (0, 3)

    @given(st.lists(st.integers(0, 1), min_size=3, max_size=3),
           st.lists(st.integers(0, 1), min_size=3, max_size=3))
    def test_one_bit_is_or(self, a, b):
        cfg = GeometryConfig(4, 0, 1)
        got = combine_niche_maps(tuple(a), tuple(b), 3, cfg)
        assert got == (0, *(x | y for x, y in zip(a, b)))

    def test_both_missing_rejected(self):
        with pytest.raises(StructuralError):
            combine_niche_maps(None, None, 2, self.cfg)

    def test_length_mismatch_rejected(self):
        with pytest.raises(StructuralError):
            combine_niche_maps((0,), (0, 0), 2, self.cfg)


class TestFigureTree:
    expected = {
        (4, 0): (0, 1, 1, 0),
        (3, 0): (0, 1, 0),
        (3, 1): (1, 0, 0),
        (2, 0): (0, 0),
        (2, 1): (1, 0),
        (2, 3): (0, 0),
        (1, 2): (0,),
    }

    @pytest.mark.parametrize("w", [1, 2, 3])
    def test_maps(self, w):
        tree = figure_tree(w)
        assert {(b.level, b.index): n.map for b, n in tree.nodes()} == self.expected

    def test_niches(self, fig_tree):
        assert fig_tree.niches() == {(1, 3), (2, 2)}

    def test_true_counts_root(self, fig_tree):
        assert true_niche_counts(fig_tree, 4, 0) == [0, 1, 1, 0]

    def test_true_counts_leaf_all_zero(self, fig_tree):
        assert true_niche_counts(fig_tree, 2, 0) == [0, 0]

    def test_render_parses_to_figure(self, fig_tree):
        parsed = parse_rendering(render_tree(fig_tree))
        assert parsed["nodes"] == self.expected
        assert parsed["niches"] == {(1, 3), (2, 2)}


def test_empty_tree_is_one_niche():
    tree = BlockTree(GeometryConfig(4, 0, 2))
    assert tree.is_empty and tree.niches() == {(4, 0)}
    text = render_tree(tree)
    assert parse_rendering(text) == {"nodes": {}, "niches": {(4, 0)}}
    assert "|" + "-" * 63 + "|" in text


def test_check_rejects_childless_interior():
    tree = build_tree(GeometryConfig(3, 0, 2), [(1, 0)])
    tree.levels[1][0] = Node(map=(0,))
    with pytest.raises(StructuralError):
        tree.check()


def test_check_rejects_stale_map(fig_tree):
    fig_tree.levels[4][0].map = (0, 1, 2, 0)
    with pytest.raises(StructuralError):
        fig_tree.check()


def test_insert_under_leaf_rejected(fig_tree):
    with pytest.raises(StructuralError):
        fig_tree.insert_leaf(0, 1)


class TestSerialization:
    def test_format(self, fig_tree):
        lines = dumps(fig_tree).splitlines()
        assert lines[0] == "geomtree v1 n=4 m=0 w=2"
        assert lines[1] == "L4 I0 int map=[0,1,1,0]"
        assert "L1 I2 leaf map=[0]" in lines
        order = [(int(ln.split()[0][1:]), int(ln.split()[1][1:])) for ln in lines[1:]]
        assert order == sorted(order, key=lambda t: (-t[0], t[1]))

    def test_vtree_payload(self):
        tree = build_tree(GeometryConfig(4, 0, 2), [])
        node = tree.insert_leaf(3, 1, full=True, back=0x40)
        tree.recompute_path(3, 1)
        text = dumps(tree, vtree=True)
        assert "L3 I1 leaf map=[0,0,0] full=1 back=0x40" in text
        again = loads(text)
        assert again.get(3, 1).back == 0x40 and again.get(3, 1).full
        assert node.back == 0x40

    @given(trees())
    def test_round_trip(self, tree):
        text = dumps(tree)
        assert dumps(loads(text)) == text

    def test_rejects_other_version(self, fig_tree):
        with pytest.raises(StructuralError):
            loads(dumps(fig_tree).replace("v1", "v2", 1))

    def test_rejects_bad_map(self, fig_tree):
        with pytest.raises(StructuralError):
            loads(dumps(fig_tree).replace("map=[0,1,1,0]", "map=[0,1,1,1]"))

    def test_rejects_out_of_range(self):
        with pytest.raises(StructuralError):
            loads("geomtree v1 n=2 m=0 w=2\nL1 I7 leaf map=[0]\n")

    def test_rejects_duplicate(self):
        with pytest.raises(StructuralError):
            loads("geomtree v1 n=1 m=0 w=2\nL1 I0 leaf map=[0]\nL1 I0 leaf map=[0]\n")


@given(trees())
def test_render_parse_identity(tree):
    assert parse_rendering(render_tree(tree)) == semantic_content(tree)


@given(trees(max_bits=9))
def test_render_parse_identity_listing(tree):
    # wide spaces use the listing form
    assert parse_rendering(render_tree(tree)) == semantic_content(tree)


@given(trees())
def test_niche_map_soundness(tree):
    sat = tree.config.saturation
    for bid, node in tree.nodes():
        true = true_niche_counts(tree, bid.level, bid.index)
        for counter, count in zip(node.map, true):
            assert counter <= count
            assert (counter == 0) == (count == 0)
            if count < sat:
                assert counter == count


@given(trees())
def test_structural_invariants(tree):
    tree.check()
    for bid, node in tree.nodes():
        assert bid.base % bid.size == 0
        if not node.leaf:
            assert node.left or node.right
    # every niche's sibling exists
    for level, index in tree.niches():
        if level < tree.config.height_bits:
            assert tree.get(level, index ^ 1) is not None
