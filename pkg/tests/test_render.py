import math

import numpy as np
import pytest

from shadetree.dsl import parse_tree
from shadetree.errors import DimensionMismatch, UnknownEnvIndex
from shadetree.image import (ShadingImage, from_uint8, normal_field, sphere_mask,
                             to_uint8)
from shadetree.render import (compose_mix, compose_multiply, compose_screen,
                              evaluate_mask, halfspace_soft,
                              halfspace_threshold_grad, invert_screen_residual,
                              render_leaf, render_tree, render_tree_size)
from shadetree.tree import (AlbedoParams, DiffRefParams, EnvRefParams,
                            HalfSpaceMask, HighlightParams, LeafFamily,
                            RasterMask, tree_to_json)

import _scalar_ref as ref
from conftest import random_image


SIZE = 64


def const(v, size=SIZE):
    return ShadingImage.constant((v, v, v), size)


class TestCompositors:
    def test_multiply_identity_and_absorber(self, rng):
        a = random_image(rng, SIZE)
        out = compose_multiply(const(1.0), a)
        assert np.allclose(out.rgb, a.rgb)
        out0 = compose_multiply(const(0.0), a)
        assert np.all(out0.rgb == 0.0)

    def test_multiply_paper_value(self):
        out = compose_multiply(const(0.5), const(0.8))
        assert np.allclose(out.rgb[out.valid], 0.4)

    def test_screen_identity_element(self, rng):
        a = random_image(rng, SIZE)
        out = compose_screen(a, const(0.0))
        assert np.allclose(out.rgb, a.rgb)

    def test_screen_paper_value(self):
        out = compose_screen(const(0.5), const(0.5))
        assert np.allclose(out.rgb[out.valid], 0.75)

    def test_screen_commutative(self, rng):
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        ab = compose_screen(a, b)
        ba = compose_screen(b, a)
        assert np.allclose(ab.rgb, ba.rgb, atol=1e-12)

    def test_screen_duality(self, rng):
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        s = compose_screen(a, b)
        lhs = (1.0 - s.rgb)[s.valid]
        rhs = ((1.0 - a.rgb) * (1.0 - b.rgb))[s.valid]
        # 1 - (1 - z) double-rounds for z < 0.5; equality holds to 1 ulp
        assert np.allclose(lhs, rhs, rtol=0.0, atol=1.2e-16)

    def test_associativity(self, rng):
        a, b, c = (random_image(rng, SIZE) for _ in range(3))
        m1 = compose_multiply(compose_multiply(a, b), c)
        m2 = compose_multiply(a, compose_multiply(b, c))
        assert np.allclose(m1.rgb, m2.rgb, atol=1e-6)
        s1 = compose_screen(compose_screen(a, b), c)
        s2 = compose_screen(a, compose_screen(b, c))
        assert np.allclose(s1.rgb, s2.rgb, atol=1e-6)

    def test_mix_extremes(self, rng):
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        ones = RasterMask(np.ones((SIZE, SIZE), bool))
        zeros = RasterMask(np.zeros((SIZE, SIZE), bool))
        assert np.allclose(compose_mix(a, b, ones).rgb, a.rgb)
        assert np.allclose(compose_mix(a, b, zeros).rgb, b.rgb)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            compose_multiply(const(1.0, 32), const(1.0, 64))


class TestMasks:
    def test_halfspace_upper_half_count(self):
        # brute-force count of pixels with n_y > 0
        mask = HalfSpaceMask((0.0, 1.0, 0.0), 0.0)
        normals = normal_field(SIZE, SIZE)
        m = evaluate_mask(mask, normals)
        expected = np.zeros((SIZE, SIZE))
        for y in range(SIZE):
            for x in range(SIZE):
                n = ref.normal_at(x, y, SIZE, SIZE)
                expected[y, x] = 1.0 if n[1] > 0 else 0.0
        valid = normals.valid
        assert np.array_equal(m[valid], expected[valid])
        assert m[valid].sum() == expected[valid].sum()

    def test_binarize_yields_exact_binary(self):
        mask = HalfSpaceMask((0.0, 1.0, 0.0), 0.1, softness=0.2, binarize=True)
        normals = normal_field(SIZE, SIZE)
        m = evaluate_mask(mask, normals)
        assert set(np.unique(m)) <= {0.0, 1.0}

    def test_soft_relaxation_is_smooth(self):
        mask = HalfSpaceMask((0.0, 1.0, 0.0), 0.0, softness=0.1, binarize=True)
        normals = normal_field(SIZE, SIZE)
        soft = evaluate_mask(mask, normals, binarize=False)
        assert 0.0 < soft[normals.valid].mean() < 1.0
        assert np.any((soft > 0.05) & (soft < 0.95))

    def test_threshold_grad_matches_finite_differences(self):
        normals = normal_field(32, 32)
        mask = HalfSpaceMask((0.0, 1.0, 0.0), 0.15, softness=0.08)
        g = halfspace_threshold_grad(mask, normals)
        eps = 1e-5
        up = halfspace_soft(HalfSpaceMask((0, 1, 0), 0.15 + eps, softness=0.08), normals)
        dn = halfspace_soft(HalfSpaceMask((0, 1, 0), 0.15 - eps, softness=0.08), normals)
        fd = (up - dn) / (2 * eps)
        sel = np.abs(fd) > 1e-3
        assert np.allclose(g[sel], fd[sel], rtol=1e-4, atol=1e-7)

    def test_raster_downsampling(self):
        bits = np.zeros((64, 64), bool)
        bits[:32] = True
        m = evaluate_mask(RasterMask(bits), normal_field(32, 32))
        assert m.shape == (32, 32)
        assert np.all(m[:16] == 1.0)
        assert np.all(m[16:] == 0.0)


class TestLeaves:
    def test_highlight_center_is_one(self, envlib):
        normals = normal_field(65, 65)  # odd size puts a pixel at u=v=0
        img = render_leaf(LeafFamily.HIGHLIGHT,
                          HighlightParams((0, 0, 1), 300.0), normals, envlib)
        cy, cx = 32, 32  # u = 2*32/65-1 ~ -0.015; close to center
        assert img.rgb[cy, cx, 0] > 0.9

    def test_diffref_ambient_floor(self, envlib):
        normals = normal_field(SIZE, SIZE)
        img = render_leaf(LeafFamily.DIFFREF,
                          DiffRefParams((0, 0, 1), 0.2), normals, envlib)
        rim = img.rgb[normals.valid & (normals.n[..., 2] < 0.05)]
        if rim.size:
            assert np.allclose(rim, 0.2, atol=0.02)
        assert img.rgb[normals.valid].min() >= 0.2 - 1e-9

    def test_albedo_uniform(self, envlib):
        normals = normal_field(SIZE, SIZE)
        img = render_leaf(LeafFamily.ALBEDO, AlbedoParams((0.9, 0.1, 0.1)),
                          normals, envlib)
        assert np.allclose(img.rgb[img.valid], (0.9, 0.1, 0.1))

    def test_unknown_env_index(self, envlib):
        normals = normal_field(SIZE, SIZE)
        with pytest.raises(UnknownEnvIndex):
            render_leaf(LeafFamily.ENVREF, EnvRefParams(99, 0.0), normals, envlib)

    def test_toon_bands_quantize(self, envlib):
        normals = normal_field(SIZE, SIZE)
        img = render_leaf(LeafFamily.DIFFREF,
                          DiffRefParams((0, 0, 1), 0.0, bands=3), normals, envlib)
        values = set(np.round(np.unique(img.rgb[img.valid]), 6))
        assert values <= {0.0, 0.5, 1.0}


class TestRenderTree:
    def test_single_leaf_base_case(self, envlib):
        tree = parse_tree("Albedo(color=[0.2,0.4,0.6])")
        normals = normal_field(SIZE, SIZE)
        direct = render_leaf(LeafFamily.ALBEDO, tree.params, normals, envlib)
        assert np.array_equal(render_tree(tree, normals, envlib).rgb, direct.rgb)

    def test_multiply_by_white_identity(self, envlib):
        x = parse_tree("DiffRef(lobe=[0,0.6,0.8], ambient=0.3)")
        tree = parse_tree("Multiply(Albedo(color=[1,1,1]), "
                          "DiffRef(lobe=[0,0.6,0.8], ambient=0.3))")
        normals = normal_field(SIZE, SIZE)
        assert np.allclose(render_tree(tree, normals, envlib).rgb,
                           render_tree(x, normals, envlib).rgb)

    def test_output_bounds_and_background(self, rng, envlib):
        from conftest import random_tree

        for _ in range(10):
            t = random_tree(rng, max_depth=3)
            img = render_tree_size(t, SIZE, envlib)
            assert img.rgb.min() >= 0.0 and img.rgb.max() <= 1.0
            assert np.all(img.rgb[~img.valid] == 0.0)

    def test_deterministic(self, rng, envlib):
        from conftest import random_tree

        t = random_tree(rng, max_depth=4)
        a = render_tree_size(t, SIZE, envlib)
        b = render_tree_size(t, SIZE, envlib)
        assert np.array_equal(a.rgb, b.rgb)

    def test_matches_scalar_reference(self, envlib):
        # independent per-pixel scalar evaluator oracle
        tree = parse_tree(
            "Mix(Screen(Multiply(Albedo(color=[0.8,0.55,0.3]), "
            "DiffRef(lobe=[0.2,0.4,0.894427], ambient=0.25)), "
            "Highlight(lobe=[0.1,0.5,0.860233], sharpness=90)), "
            "EnvRef(index=4, rotation=1.25), HalfSpace(dir=[0.3,0.8,0.519615], t=0.2))")
        size = 48
        fast = render_tree_size(tree, size, envlib)
        envmaps = [m.tolist() for m in envlib.maps]
        slow = ref.render_tree_scalar(tree_to_json(tree), size, size, envmaps)
        slow_arr = np.array(slow)
        assert np.allclose(fast.rgb, slow_arr, atol=1e-12)
        # also byte-exact after 8-bit gamma encoding
        assert np.array_equal(to_uint8(fast.rgb), to_uint8(slow_arr))


class TestScreenInverse:
    def test_algebraic_example(self):
        p, cr = const(0.75), const(0.5)
        cl, clamped = invert_screen_residual(p, cr)
        assert np.allclose(cl.rgb[cl.valid], 0.5)
        assert not clamped.any()

    def test_identity_element(self, rng):
        p = random_image(rng, SIZE)
        cl, _ = invert_screen_residual(p, const(0.0))
        assert np.allclose(cl.rgb, p.rgb)

    def test_round_trip_unclamped(self, rng):
        cl = ShadingImage(rng.uniform(0.0, 0.9, (SIZE, SIZE, 3)))
        cr = ShadingImage(rng.uniform(0.0, 0.9, (SIZE, SIZE, 3)))
        p = compose_screen(cl, cr)
        rec, clamped = invert_screen_residual(p, cr)
        assert not clamped.any()
        back = compose_screen(rec, cr)
        assert np.allclose(back.rgb[back.valid], p.rgb[p.valid], atol=1e-9)

    def test_clamp_flagged(self):
        p = const(0.2)
        cr = const(0.5)  # requires cl < 0
        cl, clamped = invert_screen_residual(p, cr)
        assert clamped.any()
        assert np.all(cl.rgb[cl.valid] == 0.0)


class TestPngGamma:
    def test_encode_decode_round_trip_u8(self, rng):
        raw = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        again = to_uint8(from_uint8(raw))
        assert np.array_equal(raw, again)

    def test_gamma_matches_scalar(self, rng):
        vals = rng.uniform(0, 1, 50)
        for v in vals:
            assert int(to_uint8(np.full((1, 1, 3), v))[0, 0, 0]) == ref.encode_gamma_u8(v)
