"""Forward renderer: evaluates shade trees bottom-up over a sphere normal field.

The view direction is fixed at (0, 0, 1) with an orthographic sphere, the
MatCap convention.  Leaf formulas (the exact parametric forms are this
package's own, documented choices):

    Albedo(color)              -> constant color
    Highlight(lobe, sharpness) -> max(0, n . lobe) ** sharpness   (grayscale)
    DiffRef(lobe, ambient)     -> ambient + (1 - ambient) * max(0, n . lobe)
    EnvRef(env, rotation)      -> lat-long lookup of r = 2 (n . v) n - v

Toon variants quantize the Highlight/DiffRef intensity into `bands` uniform
levels: q(s) = round(s * (B - 1)) / (B - 1).
"""

from __future__ import annotations

import numpy as np

from .envmap import EnvLibrary, default_library, load_latlong
from .errors import DimensionMismatch
from .image import NormalField, ShadingImage, normal_field
from .tree import (AlbedoParams, DiffRefParams, EnvRefParams, HalfSpaceMask,
                   HighlightParams, Interior, Leaf, LeafFamily, LeafParams,
                   MaskSpec, OpKind, RasterMask, ShadeTree)

__all__ = ["compose_multiply", "compose_screen", "compose_mix", "evaluate_mask",
           "render_leaf", "render_tree", "invert_screen_residual",
           "halfspace_soft", "halfspace_threshold_grad"]


def _require_grid(a: ShadingImage, b: ShadingImage, masks: bool = True) -> None:
    a.require_same_grid(b)
    if masks and not np.array_equal(a.valid, b.valid):
        raise DimensionMismatch("images have different validity masks")


def compose_multiply(cl: ShadingImage, cr: ShadingImage) -> ShadingImage:
    """Per-pixel product of the two children."""
    _require_grid(cl, cr)
    return ShadingImage(cl.rgb * cr.rgb, cl.valid)


def compose_screen(cl: ShadingImage, cr: ShadingImage) -> ShadingImage:
    """Screen mode: 1 - (1 - cl) (1 - cr) inside the valid mask."""
    _require_grid(cl, cr, masks=False)
    rgb = 1.0 - (1.0 - cl.rgb) * (1.0 - cr.rgb)
    valid = cl.valid & cr.valid
    return ShadingImage(rgb, valid)


def compose_mix(cl: ShadingImage, cr: ShadingImage, mask: MaskSpec) -> ShadingImage:
    """Mask selection: m * cl + (1 - m) * cr with m binary per pixel."""
    _require_grid(cl, cr, masks=False)
    m = evaluate_mask(mask, normal_field(cl.width, cl.height))
    rgb = m[..., None] * cl.rgb + (1.0 - m[..., None]) * cr.rgb
    return ShadingImage(rgb, cl.valid & cr.valid)


def halfspace_soft(mask: HalfSpaceMask, normals: NormalField) -> np.ndarray:
    """Pre-binarization relaxation: sigmoid((n . dir - t) / softness)."""
    proj = normals.dot(mask.direction) - mask.threshold
    if mask.softness == 0.0:
        return (proj > 0.0).astype(np.float64)
    return 1.0 / (1.0 + np.exp(-proj / mask.softness))


def halfspace_threshold_grad(mask: HalfSpaceMask, normals: NormalField) -> np.ndarray:
    """Analytic d(soft mask)/d(threshold); zero when softness is 0."""
    if mask.softness == 0.0:
        return np.zeros((normals.height, normals.width))
    s = halfspace_soft(mask, normals)
    return -s * (1.0 - s) / mask.softness


def evaluate_mask(mask: MaskSpec, normals: NormalField, *,
                  binarize: bool | None = None) -> np.ndarray:
    """Evaluate a mask to a float map on the pixel grid.

    With `binarize` left at None the mask's own flag applies; passing False
    yields the smooth relaxation used inside optimization loops.
    """
    if isinstance(mask, RasterMask):
        mh, mw = mask.shape
        if (mh, mw) == (normals.height, normals.width):
            return mask.bitmap.astype(np.float64)
        # Integer-factor downsampling by block majority keeps the mask binary.
        if mh % normals.height == 0 and mw % normals.width == 0 \
                and mh // normals.height == mw // normals.width:
            f = mh // normals.height
            blocks = mask.bitmap.reshape(normals.height, f, normals.width, f)
            return (blocks.mean(axis=(1, 3)) > 0.5).astype(np.float64)
        raise DimensionMismatch(
            f"raster mask {mask.shape} does not fit grid "
            f"{(normals.height, normals.width)}")
    soft = halfspace_soft(mask, normals)
    hard = mask.binarize if binarize is None else binarize
    if hard and mask.softness != 0.0:
        return (soft > 0.5).astype(np.float64)
    return soft


def _quantize_bands(intensity: np.ndarray, bands: int | None) -> np.ndarray:
    if bands is None:
        return intensity
    return np.round(intensity * (bands - 1)) / (bands - 1)


def render_leaf(family: LeafFamily, params: LeafParams, normals: NormalField,
                envlib: EnvLibrary | None = None) -> ShadingImage:
    h, w = normals.height, normals.width
    if family is LeafFamily.ALBEDO:
        return ShadingImage.constant(params.color, w, h, normals.valid)
    if family is LeafFamily.HIGHLIGHT:
        s = np.maximum(0.0, normals.dot(params.lobe)) ** params.sharpness
        s = _quantize_bands(s, params.bands)
        return ShadingImage(np.repeat(s[..., None], 3, axis=2), normals.valid)
    if family is LeafFamily.DIFFREF:
        d = params.ambient + (1.0 - params.ambient) * np.maximum(0.0, normals.dot(params.lobe))
        d = _quantize_bands(d, params.bands)
        return ShadingImage(np.repeat(d[..., None], 3, axis=2), normals.valid)
    if family is LeafFamily.ENVREF:
        if params.path is not None:
            env = load_latlong(params.path)
        else:
            env = (envlib or default_library()).get(params.env_index)
        return _render_envref(env, params.rotation, normals)
    raise TypeError(f"unknown family {family!r}")


def _render_envref(env: np.ndarray, rotation: float, normals: NormalField) -> ShadingImage:
    # Mirror reflection of the fixed view v = (0,0,1): r = 2 (n.v) n - v.
    nx, ny, nz = normals.n[..., 0], normals.n[..., 1], normals.n[..., 2]
    rx = 2.0 * nz * nx
    ry = 2.0 * nz * ny
    rz = 2.0 * nz * nz - 1.0
    lon = np.arctan2(rx, rz)
    lat = np.arcsin(np.clip(ry, -1.0, 1.0))
    eh, ew = env.shape[:2]
    u = ((lon + rotation + np.pi) / (2.0 * np.pi)) % 1.0
    v = (lat + np.pi / 2.0) / np.pi
    rgb = _bilinear_latlong(env, u * ew - 0.5, v * eh - 0.5)
    return ShadingImage(rgb, normals.valid)


def _bilinear_latlong(env: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample with horizontal wrap and vertical clamp."""
    eh, ew = env.shape[:2]
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0w, x1w = x0 % ew, (x0 + 1) % ew
    y0c = np.clip(y0, 0, eh - 1)
    y1c = np.clip(y0 + 1, 0, eh - 1)
    top = env[y0c, x0w] * (1 - fx) + env[y0c, x1w] * fx
    bot = env[y1c, x0w] * (1 - fx) + env[y1c, x1w] * fx
    return top * (1 - fy) + bot * fy


def render_tree(tree: ShadeTree, normals: NormalField,
                envlib: EnvLibrary | None = None) -> ShadingImage:
    """Bottom-up evaluation of the whole tree on the given grid."""
    if isinstance(tree, Leaf):
        return render_leaf(tree.family, tree.params, normals, envlib)
    left = render_tree(tree.left, normals, envlib)
    right = render_tree(tree.right, normals, envlib)
    if tree.op is OpKind.MULTIPLY:
        return compose_multiply(left, right)
    if tree.op is OpKind.SCREEN:
        return compose_screen(left, right)
    return compose_mix(left, right, tree.mask)


def render_tree_size(tree: ShadeTree, size: int = 128,
                     envlib: EnvLibrary | None = None) -> ShadingImage:
    return render_tree(tree, normal_field(size, size), envlib)


def invert_screen_residual(parent: ShadingImage, cr: ShadingImage,
                           eps: float = 1e-4) -> tuple[ShadingImage, np.ndarray]:
    """Solve screen(cl, cr) = parent for cl; returns (cl, clamped-pixel flags).

    cl = 1 - (1 - parent) / (1 - cr), clamped to [0, 1].  Where cr is within
    eps of 1 the quotient is undefined; those pixels get cl = 0 and are
    flagged together with any pixel whose unclamped solution left [0, 1].
    """
    _require_grid(parent, cr, masks=False)
    denom = 1.0 - cr.rgb
    degenerate = denom < eps
    raw = np.where(degenerate, 0.0, 1.0 - (1.0 - parent.rgb) / np.where(degenerate, 1.0, denom))
    clamped_px = degenerate | (raw < 0.0) | (raw > 1.0)
    cl = ShadingImage(np.clip(raw, 0.0, 1.0), parent.valid & cr.valid)
    return cl, clamped_px.any(axis=2) & cl.valid
