"""Image quality metrics (PSNR, SSIM) restricted to the sphere mask.

PSNR uses peak 1.0 and is capped at 99 dB (the value reported for
identical images).  SSIM follows the standard formulation: channel-mean
grayscale, 11x11 Gaussian window with sigma 1.5, stabilizers K1=0.01 and
K2=0.03 at L=1, averaged over windows that lie fully inside the valid
mask (the background is definitionally zero and would inflate scores).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch
from .image import ShadingImage

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _joint_valid(a: ShadingImage, b: ShadingImage) -> np.ndarray:
    if a.size != b.size:
        raise DimensionMismatch(f"image grids differ: {a.size} vs {b.size}")
    valid = a.valid & b.valid
    if not valid.any():
        raise DimensionMismatch("images share no valid pixels")
    return valid


def mse(a: ShadingImage, b: ShadingImage) -> float:
    valid = _joint_valid(a, b)
    diff = a.rgb[valid] - b.rgb[valid]
    return float(np.mean(diff * diff))


def psnr(a: ShadingImage, b: ShadingImage) -> float:
    """10 log10(1 / MSE) over valid pixels, capped at 99 dB."""
    err = mse(a, b)
    if err <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: ShadingImage, b: ShadingImage) -> float:
    """Mean local SSIM over fully-valid 11x11 windows."""
    valid = _joint_valid(a, b)
    ga = a.luminance()
    gb = b.luminance()
    kernel = gaussian_kernel()

    def filt(img):
        return ndimage.correlate(img, kernel, mode="constant", cval=0.0)

    mu_a = filt(ga)
    mu_b = filt(gb)
    var_a = filt(ga * ga) - mu_a * mu_a
    var_b = filt(gb * gb) - mu_b * mu_b
    cov = filt(ga * gb) - mu_a * mu_b
    c1 = _K1 * _K1
    c2 = _K2 * _K2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    ssim_map = num / den

    inside = ndimage.binary_erosion(valid, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW)),
                                    border_value=0)
    if not inside.any():
        raise DimensionMismatch("valid mask too small for an 11x11 SSIM window")
    return float(ssim_map[inside].mean())
