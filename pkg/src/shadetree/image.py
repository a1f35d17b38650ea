"""Shading images: RGB rasters over a unit-sphere silhouette.

A ShadingImage is the unit of data everywhere in this package: the input to
the decomposition, the output of the renderer, and the per-node payload of
the search.  Pixels outside the ``valid`` mask are defined to be zero and
are excluded from every loss and metric.

Convention: pixel (x, y) maps to normalized coordinates u = 2x/W - 1,
v = 2y/H - 1 (x = column, y = row); the sphere silhouette is u^2 + v^2 <= 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image

from .errors import DimensionMismatch

GAMMA = 2.2


@lru_cache(maxsize=16)
def sphere_mask(width: int, height: int) -> np.ndarray:
    """Boolean silhouette mask: (2x/W-1)^2 + (2y/H-1)^2 <= 1."""
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    u = 2.0 * x[None, :] / width - 1.0
    v = 2.0 * y[:, None] / height - 1.0
    mask = (u * u + v * v) <= 1.0
    mask.flags.writeable = False
    return mask


@lru_cache(maxsize=16)
def normal_field(width: int, height: int) -> "NormalField":
    x = np.arange(width, dtype=np.float64)
    y = np.arange(height, dtype=np.float64)
    u = np.broadcast_to(2.0 * x[None, :] / width - 1.0, (height, width)).copy()
    v = np.broadcast_to(2.0 * y[:, None] / height - 1.0, (height, width)).copy()
    valid = sphere_mask(width, height)
    nz = np.sqrt(np.clip(1.0 - u * u - v * v, 0.0, 1.0))
    n = np.stack([u, v, nz], axis=-1)
    n[~valid] = 0.0
    n.flags.writeable = False
    return NormalField(width=width, height=height, n=n, valid=valid)


@dataclass(frozen=True)
class NormalField:
    """Per-pixel unit normals n = (u, v, sqrt(1 - u^2 - v^2)) on the sphere."""

    width: int
    height: int
    n: np.ndarray        # (H, W, 3), zero outside the silhouette
    valid: np.ndarray    # (H, W) bool

    def dot(self, direction) -> np.ndarray:
        """n . direction per pixel, shape (H, W)."""
        d = np.asarray(direction, dtype=np.float64)
        return self.n @ d


class ShadingImage:
    """RGB raster in [0, 1] plus a validity mask.

    Instances are treated as immutable: the backing arrays are marked
    read-only so they can be shared freely across threads and sessions.
    """

    __slots__ = ("rgb", "valid")

    def __init__(self, rgb: np.ndarray, valid: np.ndarray | None = None, *, clamp: bool = True):
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must have shape (H, W, 3), got {rgb.shape}")
        if valid is None:
            valid = sphere_mask(rgb.shape[1], rgb.shape[0])
        else:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != rgb.shape[:2]:
                raise DimensionMismatch(
                    f"valid mask {valid.shape} does not match image {rgb.shape[:2]}")
        if clamp:
            rgb = np.clip(rgb, 0.0, 1.0)
        else:
            rgb = rgb.copy()
        rgb[~valid] = 0.0
        rgb.flags.writeable = False
        if valid.flags.writeable:
            valid = valid.copy()
            valid.flags.writeable = False
        self.rgb = rgb
        self.valid = valid

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    @classmethod
    def constant(cls, color, width: int = 128, height: int | None = None,
                 valid: np.ndarray | None = None) -> "ShadingImage":
        height = height or width
        rgb = np.empty((height, width, 3), dtype=np.float64)
        rgb[:] = np.asarray(color, dtype=np.float64)
        return cls(rgb, valid)

    def same_grid(self, other: "ShadingImage") -> bool:
        return self.size == other.size

    def require_same_grid(self, other: "ShadingImage") -> None:
        if not self.same_grid(other):
            raise DimensionMismatch(
                f"image grids differ: {self.size} vs {other.size}")

    def with_valid(self, valid: np.ndarray) -> "ShadingImage":
        """Same pixels restricted to a (typically smaller) validity region."""
        return ShadingImage(self.rgb.copy(), valid)

    def luminance(self) -> np.ndarray:
        """Channel-mean gray image, zero outside valid."""
        return self.rgb.mean(axis=2)

    def mean_color(self) -> np.ndarray:
        """Per-channel mean over valid pixels (zeros if mask is empty)."""
        if not self.valid.any():
            return np.zeros(3)
        return self.rgb[self.valid].mean(axis=0)

    def downsampled(self, factor: int) -> "ShadingImage":
        """Block-mean downsample by an integer factor.

        The reduced mask keeps a block only when all its source pixels were
        valid, so losses at low resolution never sample fill values.
        """
        if factor == 1:
            return self
        h, w = self.rgb.shape[:2]
        if h % factor or w % factor:
            raise DimensionMismatch(f"size {w}x{h} not divisible by {factor}")
        hh, ww = h // factor, w // factor
        rgb = self.rgb.reshape(hh, factor, ww, factor, 3).mean(axis=(1, 3))
        valid = self.valid.reshape(hh, factor, ww, factor).all(axis=(1, 3))
        return ShadingImage(rgb, valid)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    """Gamma-encode linear [0,1] floats to 8-bit sRGB-style values."""
    enc = np.clip(rgb, 0.0, 1.0) ** (1.0 / GAMMA)
    return np.round(enc * 255.0).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    """Linearize 8-bit values back to [0,1] floats (gamma 2.2)."""
    return (data.astype(np.float64) / 255.0) ** GAMMA


def save_png(image: ShadingImage, path) -> None:
    Image.fromarray(to_uint8(image.rgb), mode="RGB").save(path, format="PNG")


def png_bytes(image: ShadingImage) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(to_uint8(image.rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def load_png(path_or_bytes, valid: np.ndarray | None = None) -> ShadingImage:
    """Load a PNG, linearize with gamma 2.2, attach the sphere mask."""
    import io

    if isinstance(path_or_bytes, (bytes, bytearray)):
        img = Image.open(io.BytesIO(path_or_bytes))
    else:
        img = Image.open(path_or_bytes)
    arr = np.asarray(img.convert("RGB"))
    return ShadingImage(from_uint8(arr), valid)
