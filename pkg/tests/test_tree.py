import numpy as np
import pytest

from shadetree.errors import ArityError, ParamRangeError, PathError
from shadetree.tree import (AlbedoParams, DiffRefParams, EnvRefParams,
                            HalfSpaceMask, HighlightParams, Interior, Leaf,
                            LeafFamily, OpKind, RasterMask, node_count,
                            normalize_path, quantize_tree, substitute_subtree,
                            subtree_at, tree_depth, tree_from_json, tree_to_json)

from conftest import random_tree


def leaf(color=(0.5, 0.5, 0.5)):
    return Leaf(LeafFamily.ALBEDO, AlbedoParams(color))


class TestInvariants:
    def test_mix_requires_mask(self):
        with pytest.raises(ArityError):
            Interior(OpKind.MIX, leaf(), leaf())

    def test_non_mix_rejects_mask(self):
        with pytest.raises(ArityError):
            Interior(OpKind.SCREEN, leaf(), leaf(),
                     HalfSpaceMask((0, 1, 0), 0.0))

    def test_lobe_must_be_unit(self):
        with pytest.raises(ParamRangeError):
            HighlightParams((0.0, 0.0, 0.5), 64.0)
        # within 1e-6 is accepted
        HighlightParams((0.0, 0.0, 1.0 + 5e-7), 64.0)

    def test_sharpness_range(self):
        with pytest.raises(ParamRangeError):
            HighlightParams((0, 0, 1), 0.5)
        with pytest.raises(ParamRangeError):
            HighlightParams((0, 0, 1), 513.0)

    def test_ambient_and_color_ranges(self):
        with pytest.raises(ParamRangeError):
            DiffRefParams((0, 0, 1), 1.5)
        with pytest.raises(ParamRangeError):
            AlbedoParams((1.2, 0.0, 0.0))

    def test_envref_exactly_one_source(self):
        with pytest.raises(ParamRangeError):
            EnvRefParams(None, 0.0, None)
        with pytest.raises(ParamRangeError):
            EnvRefParams(2, 0.0, "some.png")

    def test_params_must_match_family(self):
        with pytest.raises(ParamRangeError):
            Leaf(LeafFamily.ALBEDO, DiffRefParams((0, 0, 1), 0.2))

    def test_bands_choices(self):
        with pytest.raises(ParamRangeError):
            DiffRefParams((0, 0, 1), 0.2, bands=7)

    def test_leaf_is_valid_tree_of_depth_one(self):
        assert tree_depth(leaf()) == 1
        assert node_count(leaf()) == 1


class TestSubstitute:
    def test_empty_path_returns_replacement(self):
        t = Interior(OpKind.MULTIPLY, leaf((1, 0, 0)), leaf((0, 1, 0)))
        r = leaf((0, 0, 1))
        assert substitute_subtree(t, (), r) == r

    def test_read_after_write(self):
        t = Interior(OpKind.MULTIPLY, leaf((1, 0, 0)), leaf((0, 1, 0)))
        r = leaf((0.25, 0.25, 0.25))
        out = substitute_subtree(t, ("R",), r)
        assert subtree_at(out, ("R",)) == r
        assert subtree_at(out, ("L",)) == t.left

    def test_path_error(self):
        with pytest.raises(PathError):
            subtree_at(leaf(), ("L",))
        with pytest.raises(PathError):
            substitute_subtree(leaf(), ("L",), leaf())

    def test_normalize_path_accepts_ints(self):
        assert normalize_path([0, 1]) == ("L", "R")
        with pytest.raises(PathError):
            normalize_path(["X"])

    def test_node_count_identity_on_random_trees(self, rng):
        # brute-force recount oracle on random trees
        for _ in range(40):
            t = random_tree(rng, max_depth=4)
            paths = [p for p, _ in _all_paths(t)]
            path = paths[rng.integers(0, len(paths))]
            repl = random_tree(rng, max_depth=3)
            old = subtree_at(t, path)
            out = substitute_subtree(t, path, repl)
            assert node_count(out) == node_count(t) - node_count(old) + node_count(repl)

    def test_no_aliasing(self, rng):
        t = random_tree(rng, max_depth=3)
        out = substitute_subtree(t, (), leaf())
        assert t == t  # original unchanged (frozen dataclasses)
        assert out is not t


def _all_paths(tree, path=()):
    yield path, tree
    if isinstance(tree, Interior):
        yield from _all_paths(tree.left, path + ("L",))
        yield from _all_paths(tree.right, path + ("R",))


class TestJson:
    def test_round_trip_random(self, rng):
        for _ in range(60):
            t = random_tree(rng)
            assert tree_from_json(tree_to_json(t)) == t

    def test_raster_mask_round_trip(self, rng):
        bits = rng.uniform(size=(8, 8)) > 0.5
        mask = RasterMask(bits)
        t = Interior(OpKind.MIX, leaf(), leaf((0.1, 0.2, 0.3)), mask)
        back = tree_from_json(tree_to_json(t))
        assert back == t

    def test_quantize_idempotent(self, rng):
        t = random_tree(rng)
        assert quantize_tree(t) == t  # random_tree already quantizes

    def test_schema_shape(self):
        t = Interior(OpKind.MIX, leaf(), leaf(), HalfSpaceMask((0, 1, 0), 0.25))
        data = tree_to_json(t)
        assert data["op"] == "Mix"
        assert len(data["children"]) == 2
        assert data["mask"]["kind"] == "halfspace"
        leaf_json = data["children"][0]
        assert leaf_json["leaf"] == "Albedo"
        assert "params" in leaf_json
