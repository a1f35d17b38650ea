import pytest

from shadetree.dsl import format_number, parse_tree, print_tree
from shadetree.errors import ArityError, DslSyntaxError, ParamRangeError
from shadetree.tree import (HalfSpaceMask, Interior, Leaf, LeafFamily, OpKind,
                            RasterMask)

from conftest import random_tree


class TestParse:
    def test_smallest_derivation(self):
        t = parse_tree("Albedo(color=[0.5,0.5,0.5])")
        assert isinstance(t, Leaf)
        assert t.family is LeafFamily.ALBEDO
        assert t.params.color == (0.5, 0.5, 0.5)

    def test_depth_two_multiply(self):
        t = parse_tree("Multiply(Albedo(color=[1,0,0]), "
                       "DiffRef(lobe=[0,0,1], ambient=0.1))")
        assert isinstance(t, Interior)
        assert t.op is OpKind.MULTIPLY
        assert t.left.family is LeafFamily.ALBEDO
        assert t.right.family is LeafFamily.DIFFREF

    def test_mix_without_mask_is_arity_error(self):
        with pytest.raises(ArityError):
            parse_tree("Mix(Albedo(color=[1,1,1]), Albedo(color=[0,0,0]))")

    def test_range_error(self):
        with pytest.raises(ParamRangeError):
            parse_tree("DiffRef(lobe=[0,0,1], ambient=1.5)")

    def test_syntax_error_carries_position(self):
        with pytest.raises(DslSyntaxError) as err:
            parse_tree("Albedo(color=[0.5,0.5)")
        assert err.value.line == 1
        assert err.value.column > 1

    def test_multiline_position(self):
        text = "Multiply(\n  Albedo(color=[1,0,0]),\n  Bogus(x=1))"
        with pytest.raises(DslSyntaxError) as err:
            parse_tree(text)
        assert err.value.line == 3

    def test_spec_example(self):
        text = ("Mix(Screen(DiffRef(lobe=[0,0.6,0.8], ambient=0.2), "
                "Highlight(lobe=[0,0.6,0.8], sharpness=64)), "
                "Albedo(color=[0.9,0.1,0.1]), HalfSpace(dir=[0,1,0], t=0.3))")
        t = parse_tree(text)
        assert t.op is OpKind.MIX
        assert isinstance(t.mask, HalfSpaceMask)
        assert t.mask.threshold == 0.3

    def test_envref_variants(self):
        t = parse_tree("EnvRef(index=3, rotation=1.5)")
        assert t.params.env_index == 3
        t2 = parse_tree('EnvRef(path="sky.png")')
        assert t2.params.path == "sky.png"
        assert t2.params.rotation == 0.0

    def test_keyword_order_free(self):
        a = parse_tree("DiffRef(lobe=[0,0,1], ambient=0.2)")
        b = parse_tree("DiffRef(ambient=0.2, lobe=[0,0,1])")
        assert a == b

    def test_trailing_garbage(self):
        with pytest.raises(DslSyntaxError):
            parse_tree("Albedo(color=[0,0,0]) extra")

    def test_unknown_node(self):
        with pytest.raises(DslSyntaxError):
            parse_tree("Potato(color=[0,0,0])")


class TestPrint:
    def test_canonical_leaf(self):
        assert print_tree(Leaf(LeafFamily.ALBEDO,
                               parse_tree("Albedo(color=[0.5,0.5,0.5])").params)) \
            == "Albedo(color=[0.5,0.5,0.5])"

    def test_mix_prints_mask_third(self):
        t = parse_tree("Mix(Albedo(color=[1,1,1]), Albedo(color=[0,0,0]), "
                       "HalfSpace(dir=[0,1,0], t=0.3))")
        text = print_tree(t)
        assert text.startswith("Mix(")
        assert text.rstrip(")").endswith("HalfSpace(dir=[0,1,0], t=0.3")

    def test_six_significant_digits(self):
        assert format_number(0.123456789) == "0.123457"
        assert format_number(64.0) == "64"
        assert format_number(1e-7) == "1e-07"

    def test_raster_round_trip(self, rng):
        bits = rng.uniform(size=(16, 16)) > 0.4
        t = Interior(OpKind.MIX,
                     parse_tree("Albedo(color=[1,0,0])"),
                     parse_tree("Albedo(color=[0,0,1])"),
                     RasterMask(bits))
        assert parse_tree(print_tree(t)) == t


class TestRoundTrip:
    def test_parse_print_identity_random(self, rng):
        for _ in range(300):
            t = random_tree(rng, max_depth=5)
            assert parse_tree(print_tree(t)) == t

    def test_print_parse_stability(self, rng):
        # print . parse is the identity on canonical text
        for _ in range(100):
            text = print_tree(random_tree(rng, max_depth=4))
            assert print_tree(parse_tree(text)) == text
