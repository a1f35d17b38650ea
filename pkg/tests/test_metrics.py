import numpy as np
import pytest

from shadetree.errors import DimensionMismatch
from shadetree.image import ShadingImage, sphere_mask
from shadetree.metrics import PSNR_CAP, psnr, ssim

import _scalar_ref as ref
from conftest import random_image

SIZE = 48


class TestPsnr:
    def test_identical_hits_cap(self, rng):
        a = random_image(rng, SIZE)
        assert psnr(a, a) == PSNR_CAP == 99.0

    def test_closed_form_mse(self):
        # MSE = 0.01 -> 20 dB
        a = ShadingImage.constant((0.5, 0.5, 0.5), SIZE)
        b = ShadingImage.constant((0.6, 0.6, 0.6), SIZE)
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_matches_scalar_reference(self, rng):
        valid = sphere_mask(SIZE, SIZE)
        for _ in range(5):
            a, b = random_image(rng, SIZE), random_image(rng, SIZE)
            expected = ref.psnr_ref(a.rgb.tolist(), b.rgb.tolist(), valid.tolist())
            assert abs(psnr(a, b) - expected) < 1e-9

    def test_noise_monotone(self, rng):
        a = random_image(rng, SIZE)
        values = []
        for sigma in (0.01, 0.05, 0.1):
            noisy = ShadingImage(a.rgb + rng.normal(0, sigma, a.rgb.shape))
            values.append(psnr(a, noisy))
        assert values[0] > values[1] > values[2]

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionMismatch):
            psnr(random_image(rng, 32), random_image(rng, 64))


class TestSsim:
    def test_self_similarity_is_one(self, rng):
        a = random_image(rng, SIZE)
        assert abs(ssim(a, a) - 1.0) < 1e-12

    def test_symmetry(self, rng):
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_constant_images_closed_form(self):
        # For constants: SSIM = (2 mu_a mu_b + c1) / (mu_a^2 + mu_b^2 + c1)
        # (the contrast/structure factor is exactly 1 with both variances 0).
        mu_a, mu_b = 0.3, 0.7
        a = ShadingImage.constant((mu_a,) * 3, SIZE)
        b = ShadingImage.constant((mu_b,) * 3, SIZE)
        c1 = 0.01 ** 2
        expected = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
        assert abs(ssim(a, b) - expected) < 1e-9

    def test_bounds(self, rng):
        for _ in range(5):
            a, b = random_image(rng, SIZE), random_image(rng, SIZE)
            value = ssim(a, b)
            assert -1.0 <= value <= 1.0

    def test_matches_scalar_reference(self, rng):
        valid = sphere_mask(SIZE, SIZE)
        a, b = random_image(rng, SIZE), random_image(rng, SIZE)
        expected = ref.ssim_ref(a.luminance().tolist(), b.luminance().tolist(),
                                valid.tolist())
        assert abs(ssim(a, b) - expected) < 1e-6
