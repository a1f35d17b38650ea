"""Stage-1 single-step decomposition: propose, score, and select splits.

Candidate (left, right, op, mask) splits come from three deterministic
image-analysis proposer families with randomized parameters, so repeated
calls with different RNG streams explore different candidate sets:

  a. luminance/channel threshold segmentation  -> Mix splits
  b. bright-blob residual extraction           -> Screen splits
  c. chroma quotient against a constant albedo -> Multiply splits

Each candidate is scored with the weighted selection loss

    l_select = l_recon + alpha * l_sim + beta * l_blank + gamma * l_white

where every norm is a root-mean-square over the parent's valid pixels
(resolution independent) and the child means are per-channel expectations
over the child's own support.  Children may carry a validity mask smaller
than the sphere (the region they are actually responsible for); pixels
outside it are zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envmap import EnvLibrary, default_library
from .errors import DimensionMismatch, NoProposal
from .features import pixel_rms
from .image import NormalField, ShadingImage, normal_field
from .optimize import FitConfig, fit_leaf
from .render import evaluate_mask, invert_screen_residual, render_leaf
from .tree import (AlbedoParams, HalfSpaceMask, HighlightParams, LeafFamily,
                   LeafParams, MaskSpec, OpKind, RasterMask, unit)

__all__ = ["ProposeConfig", "SplitScores", "CandidateSplit", "ChildVerdict",
           "propose_splits", "select_operation", "score_candidate",
           "classify_child", "should_defer", "recompose"]

_LOG_FLOOR = 1e-8


@dataclass
class ProposeConfig:
    alpha: float = 0.1              # weight of l_sim
    beta: float = 0.01              # weight of l_blank
    gamma: float = 0.01             # weight of l_white
    t_samples: int = 16
    tau: float = 0.06               # stage-2 deferral threshold on l_select
    defer_when_above: bool = True   # defer when min l_select > tau (see docs)
    theta_leaf: float = 0.02        # leaf RMSE threshold for classify_child
    near_constant_std: float = 0.0035
    classify_fit: FitConfig = field(default_factory=lambda: FitConfig(
        max_evals=180, restarts=1, refine_evals=16, full_polish_evals=32,
        highlight_fit_size=64, band_polish_evals=32, env_rotation_grid=12))


@dataclass(frozen=True)
class SplitScores:
    l_recon: float
    l_sim: float
    l_blank: float
    l_white: float
    l_select: float


@dataclass
class CandidateSplit:
    left: ShadingImage
    right: ShadingImage
    op: OpKind
    mask: MaskSpec | None
    scores: SplitScores | None = None
    source: str = ""                # proposer tag, for traces


@dataclass
class ChildVerdict:
    is_leaf: bool
    family: LeafFamily | None
    fit_loss: float                 # best pixel RMSE across families
    params: LeafParams | None = None


def _rms_masked(diff: np.ndarray, valid: np.ndarray) -> float:
    """RMS over valid pixels and channels."""
    sel = diff[valid]
    if sel.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(sel * sel)))


def recompose(op: OpKind, left: ShadingImage, right: ShadingImage,
              mask: MaskSpec | None, normals: NormalField) -> np.ndarray:
    """Apply a compositing op to child rgb arrays (no mask/grid checks)."""
    if op is OpKind.MULTIPLY:
        return left.rgb * right.rgb
    if op is OpKind.SCREEN:
        return 1.0 - (1.0 - left.rgb) * (1.0 - right.rgb)
    m = evaluate_mask(mask, normals)[..., None]
    return m * left.rgb + (1.0 - m) * right.rgb


def score_candidate(parent: ShadingImage, candidate: CandidateSplit,
                    config: ProposeConfig | None = None) -> CandidateSplit:
    """Fill in the four component losses and the weighted selection loss."""
    config = config or ProposeConfig()
    if candidate.left.size != parent.size or candidate.right.size != parent.size:
        raise DimensionMismatch("candidate children must match the parent grid")
    normals = normal_field(parent.width, parent.height)
    valid = parent.valid
    recon = recompose(candidate.op, candidate.left, candidate.right,
                      candidate.mask, normals)
    l_recon = _rms_masked(parent.rgb - recon, valid)
    sim_arg = (_rms_masked(parent.rgb - candidate.left.rgb, valid) +
               _rms_masked(parent.rgb - candidate.right.rgb, valid))
    l_sim = -float(np.log(max(sim_arg, _LOG_FLOOR)))

    def chan_mean(img: ShadingImage) -> np.ndarray:
        return img.mean_color()

    ml, mr = chan_mean(candidate.left), chan_mean(candidate.right)
    blank_arg = (float(np.sqrt(np.mean((ml - 1.0) ** 2))) +
                 float(np.sqrt(np.mean((mr - 1.0) ** 2))))
    white_arg = (float(np.sqrt(np.mean(ml ** 2))) +
                 float(np.sqrt(np.mean(mr ** 2))))
    l_blank = -float(np.log(max(blank_arg, _LOG_FLOOR)))
    l_white = -float(np.log(max(white_arg, _LOG_FLOOR)))
    l_select = (l_recon + config.alpha * l_sim + config.beta * l_blank +
                config.gamma * l_white)
    candidate.scores = SplitScores(l_recon, l_sim, l_blank, l_white, l_select)
    return candidate


# ---------------------------------------------------------------------------
# Proposers
# ---------------------------------------------------------------------------

def _segmentation_channel(parent: ShadingImage, which: int) -> np.ndarray:
    if which == 0:
        return parent.luminance()
    return parent.rgb[..., which - 1]


def _fit_halfspace(bits: np.ndarray, normals: NormalField,
                   valid: np.ndarray) -> tuple[HalfSpaceMask, float]:
    """Best halfspace n.dir > t matching a binary map; returns (mask, agreement)."""
    rng_dirs = _fib_sphere(48)
    labels = bits[valid]
    best = None
    for d in rng_dirs:
        proj = (normals.n @ d)[valid]
        order = np.argsort(proj)
        sorted_labels = labels[order]
        # choose the cut maximizing agreement: prefix zeros + suffix ones
        ones_after = np.concatenate([np.cumsum(sorted_labels[::-1])[::-1], [0]])
        zeros_before = np.concatenate([[0], np.cumsum(1 - sorted_labels)])
        agree = zeros_before + ones_after
        k = int(np.argmax(agree))
        score = agree[k] / labels.size
        if best is None or score > best[2]:
            sp = np.sort(proj)
            if k == 0:
                t = float(sp[0] - 1e-6)
            elif k == labels.size:
                t = float(sp[-1] + 1e-6)
            else:
                t = float((sp[k - 1] + sp[k]) / 2)
            best = (d, np.clip(t, -1.0, 1.0), float(score))
    d, t, score = best
    return HalfSpaceMask(unit(d), t), score


def _fib_sphere(count: int) -> np.ndarray:
    """Deterministic direction samples (Fibonacci sphere + axes)."""
    i = np.arange(count, dtype=np.float64)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    axes = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0],
                     [0, 0, 1], [0, 0, -1]], dtype=np.float64)
    return np.concatenate([pts, axes])


class _ParentContext:
    """Shared per-parent statistics for the proposers.

    The gates below are what makes deterministic proposers usable: each
    family only emits a candidate when its generative assumption plausibly
    holds, because raster Mix splits and chroma quotients can reconstruct
    *any* parent exactly and would otherwise always win on l_recon.
    """

    def __init__(self, parent: ShadingImage, normals: NormalField):
        from scipy import ndimage

        self.parent = parent
        self.normals = normals
        self.lum = parent.luminance()
        gy, gx = np.gradient(parent.rgb, axis=(0, 1))
        self.grad = np.sqrt(gy * gy + gx * gx).max(axis=2)
        # Interior = valid minus the silhouette rim, where gradients explode.
        self.interior = ndimage.binary_erosion(parent.valid, np.ones((3, 3)))
        g_int = self.grad[self.interior]
        self.grad_floor = float(np.median(g_int)) if g_int.size else 0.0
        self._dilate = lambda b: ndimage.binary_dilation(b, np.ones((3, 3)))

    def boundary_contrast(self, bits: np.ndarray) -> float:
        """Median channel-gradient on the region boundary vs. the interior."""
        boundary = (self._dilate(bits) ^ bits) & self.interior
        boundary |= (self._dilate(~bits) ^ ~bits) & self.interior
        if boundary.sum() < 8:
            return 0.0
        edge = float(np.median(self.grad[boundary]))
        return edge / max(self.grad_floor, 1e-4)


MIN_MIX_REGION = 0.15         # both Mix regions must cover this much of the sphere
MIX_EDGE_RATIO = 2.5          # boundary gradient must exceed this multiple of typical
MIX_COLOR_DELTA = 0.05        # region mean colors must differ this much
SCREEN_MAX_BLOB = 0.40        # a highlight blob is compact
SCREEN_MIN_LIFT = 0.12        # blob peak must rise above the baseline
MULTIPLY_MAX_SATURATION = 0.5  # quotient may not peg a channel everywhere
MULTIPLY_MIN_TINT = 0.08      # near-white albedo factors are trivial
MULTIPLY_MIN_CHANGE = 0.04    # quotient must differ from the parent


def _mix_gates_ok(ctx: _ParentContext, bits: np.ndarray) -> bool:
    parent = ctx.parent
    frac = bits[parent.valid].mean()
    if not (MIN_MIX_REGION <= frac <= 1.0 - MIN_MIX_REGION):
        return False
    mean_l = parent.rgb[bits].mean(axis=0)
    mean_r = parent.rgb[parent.valid & ~bits].mean(axis=0)
    if np.abs(mean_l - mean_r).max() < MIX_COLOR_DELTA:
        return False
    # A genuine mask leaves a discontinuity along its boundary; cuts through
    # smooth shading do not.
    return ctx.boundary_contrast(bits) >= MIX_EDGE_RATIO


def _mix_candidates_for(ctx: _ParentContext, bits: np.ndarray, tag: str,
                        prefer_halfspace: bool = True) -> list[CandidateSplit]:
    parent, normals = ctx.parent, ctx.normals
    out: list[CandidateSplit] = []
    if prefer_halfspace:
        hs, agreement = _fit_halfspace(bits, normals, parent.valid)
        if agreement > 0.95:
            hs_bits = evaluate_mask(hs, normals).astype(bool) & parent.valid
            if 0 < hs_bits.sum() < parent.valid.sum():
                out.append(CandidateSplit(parent.with_valid(hs_bits),
                                          parent.with_valid(parent.valid & ~hs_bits),
                                          OpKind.MIX, hs,
                                          source=f"{tag}/halfspace agree={agreement:.3f}"))
    out.append(CandidateSplit(parent.with_valid(bits),
                              parent.with_valid(parent.valid & ~bits),
                              OpKind.MIX, RasterMask(bits), source=f"{tag}/raster"))
    return out


def _propose_mix(ctx: _ParentContext, rng: np.random.Generator) -> list[CandidateSplit]:
    """Mix hypotheses from channel level-sets (randomized threshold)."""
    parent = ctx.parent
    channel = int(rng.integers(0, 4))
    source = _segmentation_channel(parent, channel)
    values = source[parent.valid]
    lo, hi = np.quantile(values, [0.10, 0.90])
    if hi - lo < 1e-4:
        return []
    thr = float(rng.uniform(lo, hi))
    bits = (source > thr) & parent.valid
    if not _mix_gates_ok(ctx, bits):
        return []
    return _mix_candidates_for(ctx, bits, f"mix-ch{channel} t={thr:.3f}")


def _propose_mix_plane(ctx: _ParentContext, rng: np.random.Generator) -> list[CandidateSplit]:
    """Mix hypotheses from edge geometry.

    A halfspace mask boundary is the level set n . dir = t, a plane in
    normal space.  Total-least-squares plane fits on random subsets of
    strong-edge normals recover candidate (dir, t) pairs; hypotheses are
    ranked by their edge inlier fraction before gating.
    """
    parent, normals = ctx.parent, ctx.normals
    edges = (ctx.grad > max(4.0 * ctx.grad_floor, 0.04)) & ctx.interior
    if edges.sum() < 40:
        return []
    en = normals.n[edges]
    picks = min(220, en.shape[0])
    idx = rng.choice(en.shape[0], size=picks, replace=False)
    sub = en[idx]
    hypotheses = []
    for _ in range(4):
        take = rng.choice(picks, size=max(8, picks // 4), replace=False)
        pts = sub[take]
        centered = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        direction = vt[-1]
        if np.linalg.norm(direction) < 1e-9:
            continue
        direction = direction / np.linalg.norm(direction)
        t = float(np.median(pts @ direction))
        inliers = float(np.mean(np.abs(sub @ direction - t) < 0.06))
        hypotheses.append((inliers, tuple(direction), t))
    if not hypotheses:
        return []
    hypotheses.sort(reverse=True)
    out: list[CandidateSplit] = []
    for inliers, direction, t in hypotheses[:2]:
        if inliers < 0.25:
            continue
        bits = (normals.n @ np.asarray(direction) > t) & parent.valid
        if not _mix_gates_ok(ctx, bits):
            continue
        mask = HalfSpaceMask(unit(direction), float(np.clip(t, -1, 1)))
        out.append(CandidateSplit(parent.with_valid(bits),
                                  parent.with_valid(parent.valid & ~bits),
                                  OpKind.MIX, mask,
                                  source=f"mix-plane inliers={inliers:.2f}"))
        if len(out) >= 1:
            break
    return out


def _propose_screen(ctx: _ParentContext, rng: np.random.Generator) -> list[CandidateSplit]:
    parent, normals = ctx.parent, ctx.normals
    lum = ctx.lum
    values = lum[parent.valid]
    peak = float(values.max())
    if peak < 0.2:
        return []
    q = float(rng.uniform(0.70, 0.97))
    thr = float(np.quantile(values, q))
    blob = (lum >= thr) & parent.valid
    if blob.sum() < 4:
        blob = (lum >= peak - 1e-6) & parent.valid
    if blob.sum() / parent.valid.sum() > SCREEN_MAX_BLOB:
        return []
    below = values[values < thr]
    baseline = float(np.quantile(below, 0.5)) if below.size else 0.0
    if peak - baseline < SCREEN_MIN_LIFT:
        return []

    variant = int(rng.integers(0, 2))
    if variant == 0:
        # Parametric single-lobe highlight estimated from the blob.
        ys, xs = np.nonzero(blob)
        lum_blob = lum[ys, xs]
        iy, ix = ys[np.argmax(lum_blob)], xs[np.argmax(lum_blob)]
        lobe = normals.n[iy, ix]
        if np.linalg.norm(lobe) < 1e-6:
            return []
        lobe = unit(lobe)
        alpha = float(np.clip((peak - baseline) / max(1e-3, 1.0 - baseline), 0.05, 1.0))
        # Sharpness from the area of the level set at a random fraction r of
        # the peak: a cap n.lobe > c projects to a disk of area 1 - c^2, so
        # (n.lobe)^s = r on its rim gives s = ln r / ln sqrt(1 - f).
        r = float(rng.uniform(0.35, 0.65))
        level = baseline + r * (peak - baseline)
        f = float(((lum >= level) & parent.valid).sum() / parent.valid.sum())
        f = min(max(f, 1e-4), 0.9)
        sharp = float(np.clip(np.log(r) / np.log(np.sqrt(1.0 - f)), 1.0, 512.0))
        hl = render_leaf(LeafFamily.HIGHLIGHT, HighlightParams(lobe, sharp), normals)
        right = ShadingImage(hl.rgb * alpha, parent.valid)
        tag = f"screen/lobe a={alpha:.2f} s={sharp:.0f}"
    else:
        # Non-parametric residual: everything above the baseline, rescaled.
        resid = np.clip((lum - baseline) / max(1e-3, 1.0 - baseline), 0.0, 1.0)
        resid[~parent.valid] = 0.0
        right = ShadingImage(np.repeat(resid[..., None], 3, axis=2), parent.valid)
        tag = f"screen/residual q={q:.2f}"
    left, clamped = invert_screen_residual(parent, right)
    left = left.with_valid(parent.valid & ~clamped)
    return [CandidateSplit(left, right, OpKind.SCREEN, None, source=tag)]


def _propose_multiply(ctx: _ParentContext, rng: np.random.Generator) -> list[CandidateSplit]:
    parent = ctx.parent
    values = parent.rgb[parent.valid]
    q = float(rng.uniform(0.90, 1.0))
    color = np.quantile(values, q, axis=0)
    if color.max() < 0.05:
        return []
    if color.min() > 1.0 - MULTIPLY_MIN_TINT:
        return []    # dividing by near-white is a trivial decomposition
    color = np.clip(color, 5e-3, 1.0)
    quotient = np.clip(parent.rgb / color, 0.0, 1.0)
    if _rms_masked(parent.rgb - quotient, parent.valid) < MULTIPLY_MIN_CHANGE:
        return []    # the constant explains nothing
    # A true albedo factor leaves a shading-like quotient; if some channel
    # saturates on most of the sphere the constant explains nothing.
    saturated = (quotient.max(axis=2) >= 0.995) & parent.valid
    if saturated.sum() / parent.valid.sum() > MULTIPLY_MAX_SATURATION:
        return []
    left = ShadingImage.constant(color, parent.width, parent.height, parent.valid)
    right = ShadingImage(quotient, parent.valid)
    return [CandidateSplit(left, right, OpKind.MULTIPLY, None,
                           source=f"multiply/chroma q={q:.2f}")]


def propose_splits(parent: ShadingImage, t_samples: int,
                   rng: np.random.Generator | None = None,
                   config: ProposeConfig | None = None,
                   envlib: EnvLibrary | None = None) -> list[CandidateSplit]:
    """Sample up to t_samples scored candidates, sorted by ascending l_select.

    Raises NoProposal for near-constant parents (those go straight to leaf
    classification) and when every proposer's applicability gate rejects
    the parent.
    """
    config = config or ProposeConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    envlib = envlib or default_library()
    if t_samples < 1:
        raise ValueError("t_samples must be >= 1")
    values = parent.rgb[parent.valid]
    if values.size == 0 or values.std(axis=0).max() < config.near_constant_std:
        raise NoProposal("parent is near-constant")
    normals = normal_field(parent.width, parent.height)
    ctx = _ParentContext(parent, normals)
    candidates: list[CandidateSplit] = []
    proposers = (_propose_mix_plane, _propose_screen, _propose_multiply, _propose_mix)
    attempts = 0
    while len(candidates) < t_samples and attempts < 4 * t_samples:
        proposer = proposers[attempts % len(proposers)]
        attempts += 1
        try:
            new = proposer(ctx, rng)
        except (ValueError, FloatingPointError):
            continue
        for cand in new:
            if len(candidates) < t_samples:
                candidates.append(score_candidate(parent, cand, config))
    if not candidates:
        raise NoProposal("no proposer produced a candidate")
    candidates.sort(key=lambda c: c.scores.l_select)
    return candidates


# ---------------------------------------------------------------------------
# Operation selection, leaf classification, deferral
# ---------------------------------------------------------------------------

def select_operation(parent: ShadingImage, left: ShadingImage, right: ShadingImage
                     ) -> tuple[OpKind, MaskSpec | None, float]:
    """Exhaustively fit all three ops; return the reconstruction argmin.

    Ties break in the fixed order Multiply < Screen < Mix.  The Mix mask is
    a halfspace fitted by coarse direction/threshold search with local
    refinement.
    """
    if left.size != parent.size or right.size != parent.size:
        raise DimensionMismatch("children must match the parent grid")
    normals = normal_field(parent.width, parent.height)
    valid = parent.valid
    best: tuple[OpKind, MaskSpec | None, float] | None = None

    for op in (OpKind.MULTIPLY, OpKind.SCREEN):
        recon = recompose(op, left, right, None, normals)
        err = _rms_masked(parent.rgb - recon, valid)
        if best is None or err < best[2]:
            best = (op, None, err)

    # Mix: the optimal pixel assignment picks whichever child is closer;
    # fit a halfspace to that assignment, then refine the threshold.
    dl = np.sum((parent.rgb - left.rgb) ** 2, axis=2)
    dr = np.sum((parent.rgb - right.rgb) ** 2, axis=2)
    prefer_left = (dl < dr) & valid
    mask, _ = _fit_halfspace(prefer_left, normals, valid)
    proj = normals.dot(mask.direction)

    def mix_err(threshold: float) -> float:
        m = (proj > threshold)[..., None]
        recon = np.where(m, left.rgb, right.rgb)
        return _rms_masked(parent.rgb - recon, valid)

    t = _refine_threshold(mix_err, mask.threshold)
    mix_mask = HalfSpaceMask(mask.direction, t)
    err = mix_err(t)
    if err < best[2]:
        best = (OpKind.MIX, mix_mask, err)
    return best


def _refine_threshold(err_fn, t0: float, span: float = 0.2, iters: int = 12) -> float:
    lo, hi = max(-1.0, t0 - span), min(1.0, t0 + span)
    ratio = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = err_fn(c), err_fn(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = err_fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = err_fn(d)
    t = c if fc < fd else d
    return float(t) if err_fn(t) < err_fn(t0) else float(t0)


def classify_child(node: ShadingImage, envlib: EnvLibrary | None = None,
                   config: ProposeConfig | None = None,
                   rng: np.random.Generator | None = None) -> ChildVerdict:
    """Fit every leaf family to the node; leaf iff the best RMSE < theta_leaf.

    The Albedo fit is analytic (the valid-pixel mean is the RMS-optimal
    constant); the other families run the regular fitter.  A decisively
    good fit short-circuits the remaining families.
    """
    config = config or ProposeConfig()
    envlib = envlib or default_library()
    rng = rng if rng is not None else np.random.default_rng(0)
    normals = normal_field(node.width, node.height)

    albedo = AlbedoParams(tuple(np.clip(node.mean_color(), 0.0, 1.0)))
    rmse = pixel_rms(render_leaf(LeafFamily.ALBEDO, albedo, normals, envlib), node)
    best: tuple[LeafFamily, LeafParams, float] = (LeafFamily.ALBEDO, albedo, rmse)
    decisive = 0.5 * config.theta_leaf
    if rmse >= decisive:
        for family in (LeafFamily.DIFFREF, LeafFamily.HIGHLIGHT, LeafFamily.ENVREF):
            params, _ = fit_leaf(node, family, config.classify_fit, envlib, rng)
            rmse = pixel_rms(render_leaf(family, params, normals, envlib), node)
            if rmse < best[2]:
                best = (family, params, rmse)
            if rmse < decisive:
                break
    family, params, rmse = best
    return ChildVerdict(rmse < config.theta_leaf, family, rmse, params)


def leaf_likeness(node: ShadingImage, envlib: EnvLibrary | None = None,
                  probe_size: int = 32) -> float:
    """Cheap lower-is-simpler score: best quick leaf-fit RMSE at low resolution.

    Used to break near-ties between split candidates: deterministic
    proposers routinely produce several pixel-exact splits, and the one
    whose children look like renderable leaves is the better branch.
    """
    envlib = envlib or default_library()
    if node.width > probe_size and node.width % probe_size == 0:
        node = node.downsampled(node.width // probe_size)
    if not node.valid.any():
        return 0.0
    normals = normal_field(node.width, node.height)
    from .optimize import quick_leaf_rmse

    return quick_leaf_rmse(node, normals, envlib)


def should_defer(best: CandidateSplit, tau: float,
                 defer_when_above: bool = True) -> bool:
    """Stage-2 deferral decision for a node's best candidate.

    The comparison direction is configurable (see the package docs on the
    early-stop rule); the default defers when even the best split scores
    worse than tau.  Equality never defers (strict inequality).
    """
    value = best.scores.l_select
    if defer_when_above:
        return value > tau
    return value < tau
