import numpy as np
import pytest

from shadetree.features import (FeatureLoss, feature_distance, objective_image,
                                pixel_rms)
from shadetree.image import ShadingImage, normal_field
from shadetree.render import render_leaf
from shadetree.tree import HighlightParams, LeafFamily

from conftest import random_image

SIZE = 64


class TestObjective:
    def test_zero_iff_identical(self, rng):
        a = random_image(rng, SIZE)
        assert objective_image(a, a) == 0.0
        b = ShadingImage(a.rgb + 0.01)
        assert objective_image(a, b) > 0.0

    def test_symmetry(self, rng):
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        cfg = FeatureLoss()
        assert abs(objective_image(a, b, cfg) - objective_image(b, a, cfg)) < 1e-12

    def test_pixel_only_matches_rms(self, rng):
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        cfg = FeatureLoss(pixel_weight=1.0, feature_weight=0.0)
        assert abs(objective_image(a, b, cfg) - pixel_rms(a, b)) < 1e-12

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            FeatureLoss(pixel_weight=0.0, feature_weight=0.0)
        with pytest.raises(ValueError):
            FeatureLoss(pixel_weight=-1.0)

    def test_highlight_shift_beats_brightness_in_features(self, envlib):
        # structure sensitivity: a 4-pixel highlight shift moves the feature
        # term more than a 1/255 global brightness change
        from shadetree.tree import unit

        normals = normal_field(128, 128)
        cfg = FeatureLoss()
        base = render_leaf(LeafFamily.HIGHLIGHT,
                           HighlightParams(unit((0.0, 0.3, 0.954)), 80.0),
                           normals, envlib)
        # shift the lobe so the blob lands ~4 pixels away
        shifted = render_leaf(LeafFamily.HIGHLIGHT,
                              HighlightParams(unit((0.0625, 0.3, 0.954)), 80.0),
                              normals, envlib)
        blob_a = np.unravel_index(np.argmax(base.luminance()), (128, 128))
        blob_b = np.unravel_index(np.argmax(shifted.luminance()), (128, 128))
        shift_px = np.hypot(blob_a[0] - blob_b[0], blob_a[1] - blob_b[1])
        assert 2.5 <= shift_px <= 6.5
        brighter = ShadingImage(np.clip(base.rgb + 1.0 / 255.0, 0, 1), base.valid)
        d_shift = feature_distance(base, shifted, cfg)
        d_bright = feature_distance(base, brighter, cfg)
        assert d_shift > d_bright
