import math

import numpy as np
import pytest

from shadetree.features import FeatureLoss, objective_image, pixel_rms
from shadetree.image import normal_field
from shadetree.optimize import (BoxSquash, FitConfig, SearchConfig, TreeVector,
                                fit_leaf, optimize_whole_tree, search_substructure)
from shadetree.render import render_leaf, render_tree, render_tree_size
from shadetree.structures import skeleton_depth
from shadetree.tree import (AlbedoParams, DiffRefParams, EnvRefParams,
                            HalfSpaceMask, HighlightParams, Interior, Leaf,
                            LeafFamily, OpKind, unit)


def angle_deg(a, b):
    return math.degrees(math.acos(min(1.0, abs(float(np.dot(a, b))))))


@pytest.fixture(scope="module")
def fit_cfg():
    return FitConfig()


@pytest.fixture(scope="module")
def search_cfg():
    return SearchConfig()


class TestBoxSquash:
    def test_round_trip(self, rng):
        box = BoxSquash([0.0, -1.0, 2.0], [1.0, 1.0, 512.0])
        for _ in range(50):
            x = rng.uniform([0.001, -0.999, 2.1], [0.999, 0.999, 511.0])
            z = box.encode(x)
            assert np.allclose(box.decode(z), x, atol=1e-9)

    def test_decode_stays_in_box(self, rng):
        box = BoxSquash([0.0], [1.0])
        for z in (-50.0, -1.0, 0.0, 1.0, 50.0):
            v = box.decode(np.array([z]))
            assert 0.0 <= v[0] <= 1.0

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            BoxSquash([1.0], [1.0])


class TestFitLeaf:
    def test_highlight_recovery(self, envlib, fit_cfg):
        normals = normal_field(128, 128)
        true = HighlightParams(unit((0.3, 0.2, 0.93)), 96.0)
        target = render_leaf(LeafFamily.HIGHLIGHT, true, normals, envlib)
        params, loss = fit_leaf(target, LeafFamily.HIGHLIGHT, fit_cfg, envlib,
                                np.random.default_rng(0))
        assert angle_deg(params.lobe, true.lobe) < 5.0
        assert abs(params.sharpness - true.sharpness) / true.sharpness < 0.10
        assert loss < 0.05

    def test_albedo_recovery(self, envlib, fit_cfg):
        normals = normal_field(128, 128)
        true = AlbedoParams((0.37, 0.62, 0.18))
        target = render_leaf(LeafFamily.ALBEDO, true, normals, envlib)
        params, _ = fit_leaf(target, LeafFamily.ALBEDO, fit_cfg, envlib,
                             np.random.default_rng(1))
        assert max(abs(np.array(params.color) - np.array(true.color))) <= 1 / 255

    def test_all_black_prefers_albedo_zero(self, envlib, fit_cfg):
        normals = normal_field(64, 64)
        from shadetree.image import ShadingImage

        target = ShadingImage(np.zeros((64, 64, 3)))
        params, loss = fit_leaf(target, LeafFamily.ALBEDO, fit_cfg, envlib,
                                np.random.default_rng(2))
        assert params.color == (0.0, 0.0, 0.0)
        assert loss == 0.0

    def test_envref_recovery(self, envlib, fit_cfg):
        normals = normal_field(128, 128)
        true = EnvRefParams(5, 2.2)
        target = render_leaf(LeafFamily.ENVREF, true, normals, envlib)
        params, loss = fit_leaf(target, LeafFamily.ENVREF, fit_cfg, envlib,
                                np.random.default_rng(3))
        assert params.env_index == 5
        assert loss < 0.02

    def test_toon_bands_recovered(self, envlib, fit_cfg):
        normals = normal_field(128, 128)
        true = DiffRefParams(unit((0.2, 0.5, 0.82)), 0.3, bands=3)
        target = render_leaf(LeafFamily.DIFFREF, true, normals, envlib)
        params, loss = fit_leaf(target, LeafFamily.DIFFREF, fit_cfg, envlib,
                                np.random.default_rng(4))
        assert params.bands == 3
        assert loss < 0.03


class TestSearch:
    def test_single_leaf_stops_at_depth_one(self, envlib, search_cfg):
        target = render_tree_size(
            Leaf(LeafFamily.DIFFREF, DiffRefParams(unit((0.1, 0.4, 0.9)), 0.2)),
            128, envlib)
        result = search_substructure(target, 3, phi=10 ** (-35 / 20),
                                     config=search_cfg, envlib=envlib,
                                     rng=np.random.default_rng(0))
        assert result.stop == "threshold"
        depths = [row[1] for row in result.trace]
        assert max(depths) == 1, "depth-2 skeletons must never be evaluated"
        assert isinstance(result.structure, Leaf)
        assert result.structure.family is LeafFamily.DIFFREF

    def test_depth_two_composite_recovered(self, envlib, search_cfg):
        tree = Interior(OpKind.MULTIPLY,
                        Leaf(LeafFamily.ALBEDO, AlbedoParams((0.75, 0.45, 0.25))),
                        Leaf(LeafFamily.DIFFREF,
                             DiffRefParams(unit((0.2, 0.35, 0.91)), 0.25)))
        target = render_tree_size(tree, 128, envlib)
        result = search_substructure(target, 2, phi=10 ** (-35 / 20),
                                     config=search_cfg, envlib=envlib,
                                     rng=np.random.default_rng(1))
        from shadetree.metrics import psnr

        rerender = render_tree_size(result.structure, 128, envlib)
        assert psnr(rerender, target) > 35.0
        assert result.loss < 10 ** (-35 / 20)

    def test_depth_order_instrumented(self, envlib):
        cfg = SearchConfig(screen_evals=20, full_evals=40, max_evals=1200,
                           leaf_fit=FitConfig(max_evals=40, restarts=1,
                                              full_polish_evals=0))
        target = render_tree_size(
            Interior(OpKind.SCREEN,
                     Leaf(LeafFamily.DIFFREF, DiffRefParams((0, 0, 1), 0.1)),
                     Leaf(LeafFamily.HIGHLIGHT, HighlightParams((0, 0, 1), 50.0))),
            64, envlib)
        result = search_substructure(target, 2, phi=0.0, config=cfg,
                                     envlib=envlib, rng=np.random.default_rng(2))
        depths = [row[1] for row in result.trace]
        assert depths == sorted(depths)

    def test_phi_zero_returns_global_argmin(self, envlib):
        cfg = SearchConfig(screen_evals=16, full_evals=30, max_evals=10 ** 9,
                           leaf_fit=FitConfig(max_evals=30, restarts=1,
                                              full_polish_evals=0))
        target = render_tree_size(
            Leaf(LeafFamily.ALBEDO, AlbedoParams((0.4, 0.4, 0.4))), 64, envlib)
        result = search_substructure(target, 1, phi=0.0, config=cfg,
                                     envlib=envlib, rng=np.random.default_rng(3))
        assert result.stop == "exhausted"
        assert len(result.trace) == 4          # full depth-1 enumeration
        losses = [row[2] for row in result.trace]
        assert result.loss == min(losses)

    def test_budget_exhaustion_returns_best(self, envlib):
        cfg = SearchConfig(screen_evals=30, full_evals=60, max_evals=200,
                           leaf_fit=FitConfig(max_evals=30, restarts=1,
                                              full_polish_evals=0))
        target = render_tree_size(
            Interior(OpKind.MULTIPLY,
                     Leaf(LeafFamily.ALBEDO, AlbedoParams((0.6, 0.3, 0.2))),
                     Leaf(LeafFamily.DIFFREF, DiffRefParams((0, 0, 1), 0.3))),
            64, envlib)
        result = search_substructure(target, 2, phi=0.0, config=cfg,
                                     envlib=envlib, rng=np.random.default_rng(4))
        assert result.stop == "budget"
        assert result.structure is not None
        assert result.evals_used >= 200


class TestWholeTree:
    def make_tree(self):
        return Interior(
            OpKind.SCREEN,
            Interior(OpKind.MULTIPLY,
                     Leaf(LeafFamily.ALBEDO, AlbedoParams((0.7, 0.4, 0.3))),
                     Leaf(LeafFamily.DIFFREF,
                          DiffRefParams(unit((0.3, 0.3, 0.9)), 0.2))),
            Leaf(LeafFamily.HIGHLIGHT, HighlightParams(unit((0.1, 0.4, 0.9)), 120.0)))

    def test_fixed_point(self, envlib, search_cfg):
        tree = self.make_tree()
        target = render_tree_size(tree, 128, envlib)
        out, loss, _ = optimize_whole_tree(tree, target, search_cfg, envlib,
                                           np.random.default_rng(0), max_evals=300)
        assert loss <= 1e-9

    def test_monotone_improvement(self, envlib, search_cfg, rng):
        tree = self.make_tree()
        target = render_tree_size(tree, 128, envlib)
        # perturb parameters ~10% then refine
        vec = TreeVector(tree)
        z = vec.encode_current() + rng.normal(0, 0.10, vec.dim)
        perturbed = vec.decode(z, soft=False)
        loss_cfg = search_cfg.loss
        before = objective_image(render_tree_size(perturbed, 128, envlib), target,
                                 loss_cfg)
        out, after, _ = optimize_whole_tree(perturbed, target, search_cfg, envlib,
                                            np.random.default_rng(1),
                                            max_evals=800)
        assert after <= before + 1e-12
        from shadetree.metrics import psnr

        assert psnr(render_tree_size(out, 128, envlib), target) >= \
            psnr(render_tree_size(perturbed, 128, envlib), target)

    def test_single_leaf_behaves_like_fit(self, envlib, search_cfg):
        leaf = Leaf(LeafFamily.ALBEDO, AlbedoParams((0.5, 0.2, 0.8)))
        target = render_tree_size(leaf, 64, envlib)
        out, loss, _ = optimize_whole_tree(leaf, target, search_cfg, envlib,
                                           np.random.default_rng(2), max_evals=200)
        assert loss <= 1e-9
        assert isinstance(out, Leaf)

    def test_loss_matches_recompute(self, envlib, search_cfg):
        tree = self.make_tree()
        target = render_tree_size(tree, 128, envlib)
        vec = TreeVector(tree)
        z = vec.encode_current() + 0.05
        perturbed = vec.decode(z, soft=False)
        out, loss, _ = optimize_whole_tree(perturbed, target, search_cfg, envlib,
                                           np.random.default_rng(3), max_evals=300)
        recomputed = objective_image(render_tree_size(out, 128, envlib), target,
                                     search_cfg.loss)
        assert abs(loss - recomputed) < 1e-9


class TestTreeVector:
    def test_round_trip_decode_encode(self, envlib):
        tree = Interior(OpKind.MIX,
                        Leaf(LeafFamily.ALBEDO, AlbedoParams((0.2, 0.4, 0.6))),
                        Leaf(LeafFamily.ENVREF, EnvRefParams(3, 1.0)),
                        HalfSpaceMask(unit((0.1, 0.9, 0.3)), 0.2))
        vec = TreeVector(tree)
        out = vec.decode(vec.encode_current(), soft=False)
        target = render_tree_size(tree, 64, envlib)
        again = render_tree_size(out, 64, envlib)
        assert pixel_rms(target, again) < 5e-3

    def test_soft_mask_relaxation(self):
        tree = Interior(OpKind.MIX,
                        Leaf(LeafFamily.ALBEDO, AlbedoParams((1, 1, 1))),
                        Leaf(LeafFamily.ALBEDO, AlbedoParams((0, 0, 0))),
                        HalfSpaceMask((0, 1, 0), 0.0))
        vec = TreeVector(tree)
        soft_tree = vec.decode(vec.encode_current(), soft=True)
        assert soft_tree.mask.softness > 0
        assert not soft_tree.mask.binarize
        hard_tree = vec.decode(vec.encode_current(), soft=False)
        assert hard_tree.mask.softness == 0.0
        assert hard_tree.mask.binarize
