"""Feature distance used by the stage-2 objectives.

A documented stand-in for a pretrained-network feature extractor: images
are compared through a 3-level Gaussian pyramid where every level
contributes its blurred RGB and a luminance gradient-magnitude channel.
This keeps the "pixel term + structural feature term" shape of the
optimization targets while staying dependency-free and fully
deterministic.  Structure-sensitive by construction: moving a highlight
changes gradient maps on every level, while a uniform brightness change
barely does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch
from .image import ShadingImage

__all__ = ["FeatureLoss", "image_features", "feature_distance", "objective_image"]

_BLUR = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class FeatureLoss:
    """Weights for the two-term image objective."""

    pixel_weight: float = 1.0
    feature_weight: float = 0.25
    levels: int = 3

    def __post_init__(self):
        if self.pixel_weight < 0 or self.feature_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.pixel_weight == 0 and self.feature_weight == 0:
            raise ValueError("at least one loss weight must be positive")
        if self.levels < 1:
            raise ValueError("pyramid needs at least one level")


def _blur(img: np.ndarray) -> np.ndarray:
    out = ndimage.convolve1d(img, _BLUR, axis=0, mode="constant", cval=0.0)
    return ndimage.convolve1d(out, _BLUR, axis=1, mode="constant", cval=0.0)


def _grad_mag(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    return np.sqrt(gx * gx + gy * gy)


def image_features(image: ShadingImage, levels: int = 3,
                   valid: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per level: (blurred RGB, luminance gradient magnitude).

    Pixels outside `valid` (default: the image's own mask) are zeroed first
    so that two images restricted to the same region compare cleanly.
    """
    rgb = image.rgb
    if valid is not None:
        rgb = rgb * valid[..., None]
    out = []
    for level in range(levels):
        gray = rgb.mean(axis=2)
        out.append((rgb, _grad_mag(gray)))
        if level + 1 < levels:
            rgb = _blur(rgb)[::2, ::2]
    return out


def feature_distance(a: ShadingImage, b: ShadingImage, cfg: FeatureLoss) -> float:
    """Mean over pyramid levels of RMS(RGB diff) + RMS(gradient diff).

    Both images are restricted to their jointly valid region first.
    """
    if a.size != b.size:
        raise DimensionMismatch(f"image grids differ: {a.size} vs {b.size}")
    joint = a.valid & b.valid
    fa = image_features(a, cfg.levels, joint)
    fb = image_features(b, cfg.levels, joint)
    total = 0.0
    for (rgb_a, g_a), (rgb_b, g_b) in zip(fa, fb):
        total += float(np.sqrt(np.mean((rgb_a - rgb_b) ** 2)))
        total += float(np.sqrt(np.mean((g_a - g_b) ** 2)))
    return total / cfg.levels


def pixel_rms(a: ShadingImage, b: ShadingImage) -> float:
    """Root-mean-square difference over jointly valid pixels."""
    if a.size != b.size:
        raise DimensionMismatch(f"image grids differ: {a.size} vs {b.size}")
    valid = a.valid & b.valid
    if not valid.any():
        return 0.0
    diff = a.rgb[valid] - b.rgb[valid]
    return float(np.sqrt(np.mean(diff * diff)))


def objective_image(rendered: ShadingImage, target: ShadingImage,
                    cfg: FeatureLoss = FeatureLoss()) -> float:
    """pixel_weight * RMS + feature_weight * pyramid feature distance."""
    value = 0.0
    if cfg.pixel_weight:
        value += cfg.pixel_weight * pixel_rms(rendered, target)
    if cfg.feature_weight:
        value += cfg.feature_weight * feature_distance(rendered, target, cfg)
    return value
