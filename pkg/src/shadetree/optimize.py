"""Stage-2 numerical machinery: leaf fitting, substructure search, whole-tree refinement.

All continuous parameters are optimized with CMA-ES plus basin restarts
(see cma.py) in an unconstrained space; boxes are enforced through a
smooth tanh squashing bijection.  Discrete choices (environment index,
toon band count) are handled by exhaustive probing around the continuous
fits.  Optimization runs at a reduced internal resolution for speed; every
reported loss is recomputed at the caller's full resolution with
binarized masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cma import OptimizerConfig, OptimizeResult, _pattern_polish, cma_minimize
from .envmap import EnvLibrary, default_library
from .features import FeatureLoss, objective_image, pixel_rms
from .image import ShadingImage, normal_field
from .render import render_leaf, render_tree
from .structures import (InteriorSkeleton, LeafSkeleton, Skeleton,
                         enumerate_structures, skeleton_depth, skeleton_signature)
from .tree import (AlbedoParams, DiffRefParams, EnvRefParams, HalfSpaceMask,
                   HighlightParams, Interior, Leaf, LeafFamily, LeafParams,
                   OpKind, RasterMask, ShadeTree, iter_leaves, substitute_subtree)

__all__ = ["FitConfig", "SearchConfig", "SearchResult", "BoxSquash", "fit_leaf",
           "search_substructure", "optimize_whole_tree", "TreeVector"]

LOG2_SHARP_MAX = 9.0        # sharpness spans [1, 512] = 2**[0, 9]


class BoxSquash:
    """Smooth bijection between R^n and a box, for unconstrained CMA."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("box upper bounds must exceed lower bounds")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * 0.5 * (np.tanh(z) + 1.0)

    def encode(self, x: np.ndarray) -> np.ndarray:
        t = (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo)
        t = np.clip(t, 1e-6, 1.0 - 1e-6)
        return np.arctanh(2.0 * t - 1.0)


@dataclass
class FitConfig:
    """Budget and resolution knobs for a single leaf fit."""

    loss: FeatureLoss = field(default_factory=FeatureLoss)
    fit_size: int = 64              # internal optimization resolution
    highlight_fit_size: int | None = None   # None = fit highlights at full res
    max_evals: int = 260
    restarts: int = 2
    refine_evals: int = 24
    full_polish_evals: int = 48     # pattern-search evals at full resolution
    band_polish_evals: int = 40     # extra polish when a toon variant wins
    sigma0: float = 0.3
    popsize: int | None = None
    pixel_only_inner: bool = True   # optimize pixel RMS; report the full objective
    try_bands: bool = True          # probe toon quantization for scalar leaves
    env_rotation_grid: int = 16

    def scaled(self, max_evals: int, restarts: int | None = None) -> "FitConfig":
        return replace(self, max_evals=max_evals,
                       restarts=restarts if restarts is not None else self.restarts)


@dataclass
class SearchConfig:
    """Budgets for the depth-ordered substructure search."""

    loss: FeatureLoss = field(default_factory=FeatureLoss)
    search_size: int = 64           # resolution used while optimizing skeletons
    screen_evals: int = 48          # quick pass run on every skeleton
    full_evals: int = 320           # promoted skeletons get this much
    promote_factor: float = 1.35    # promote if screen loss < factor * best-so-far
    max_evals: int = 4_500          # total budget across all skeletons
    extend_evals: int = 320         # extra budget when a skeleton lands near phi
    near_miss_factor: float = 2.5   # "near" means loss < factor * phi
    leaf_fit: FitConfig = field(default_factory=FitConfig)
    sigma0: float = 0.45
    popsize: int | None = None
    pixel_only_inner: bool = True   # CMA loops on pixel RMS; phi checks the full loss


@dataclass
class SearchResult:
    structure: ShadeTree            # skeleton with parameters bound
    loss: float                     # objective at full resolution, binarized masks
    evals_used: int
    stop: str                       # "threshold" | "exhausted" | "budget"
    signature: str = ""
    trace: list[tuple[str, int, float, int]] = field(default_factory=list)
    # trace rows: (skeleton signature, depth, full-res loss, cumulative evals)


# ---------------------------------------------------------------------------
# Leaf parameter encodings and data-driven initial guesses
# ---------------------------------------------------------------------------

def _unit_or_default(v: np.ndarray, default=(0.0, 0.0, 1.0)) -> tuple[float, float, float]:
    norm = float(np.linalg.norm(v))
    if norm < 1e-6:
        return default
    return (float(v[0] / norm), float(v[1] / norm), float(v[2] / norm))


class _LeafCodec:
    """Per-family packing of continuous parameters into a box."""

    def __init__(self, family: LeafFamily, frozen: LeafParams | None = None):
        self.family = family
        self.frozen = frozen    # source of discrete fields (env index, bands)
        if family is LeafFamily.ALBEDO:
            self.box = BoxSquash([0.0] * 3, [1.0] * 3)
        elif family is LeafFamily.HIGHLIGHT:
            self.box = BoxSquash([-1.2] * 3 + [0.0], [1.2] * 3 + [LOG2_SHARP_MAX])
        elif family is LeafFamily.DIFFREF:
            self.box = BoxSquash([-1.2] * 3 + [0.0], [1.2] * 3 + [1.0])
        else:  # ENVREF: rotation as (cos, sin) to avoid the wrap seam
            self.box = BoxSquash([-1.1] * 2, [1.1] * 2)

    @property
    def dim(self) -> int:
        return self.box.dim

    def to_params(self, x: np.ndarray) -> LeafParams:
        fam = self.family
        if fam is LeafFamily.ALBEDO:
            return AlbedoParams(tuple(np.clip(x, 0.0, 1.0)))
        if fam is LeafFamily.HIGHLIGHT:
            bands = self.frozen.bands if isinstance(self.frozen, HighlightParams) else None
            return HighlightParams(_unit_or_default(x[:3]), float(2.0 ** x[3]), bands)
        if fam is LeafFamily.DIFFREF:
            bands = self.frozen.bands if isinstance(self.frozen, DiffRefParams) else None
            return DiffRefParams(_unit_or_default(x[:3]), float(np.clip(x[3], 0, 1)), bands)
        rotation = math.atan2(x[1], x[0])
        if isinstance(self.frozen, EnvRefParams):
            return replace(self.frozen, rotation=rotation)
        return EnvRefParams(0, rotation)

    def from_params(self, p: LeafParams) -> np.ndarray:
        if isinstance(p, AlbedoParams):
            return np.array(p.color)
        if isinstance(p, (HighlightParams, DiffRefParams)):
            tail = math.log2(p.sharpness) if isinstance(p, HighlightParams) else p.ambient
            return np.array(list(p.lobe) + [tail])
        return np.array([math.cos(p.rotation), math.sin(p.rotation)])


def _brightest_lobe(target: ShadingImage) -> tuple[float, float, float]:
    normals = normal_field(target.width, target.height)
    lum = np.where(target.valid, target.luminance(), -1.0)
    iy, ix = np.unravel_index(int(np.argmax(lum)), lum.shape)
    return _unit_or_default(normals.n[iy, ix])


def _init_guess(family: LeafFamily, target: ShadingImage) -> np.ndarray:
    if family is LeafFamily.ALBEDO:
        return target.mean_color()
    lum = target.luminance()[target.valid]
    if family is LeafFamily.HIGHLIGHT:
        bright = float((lum > 0.5 * max(lum.max(), 1e-6)).mean())
        log2s = float(np.clip(7.0 - 5.0 * np.sqrt(bright * 8), 1.0, 8.5))
        return np.array(list(_brightest_lobe(target)) + [log2s])
    if family is LeafFamily.DIFFREF:
        ambient = float(np.clip(np.quantile(lum, 0.02), 0.0, 0.95))
        return np.array(list(_brightest_lobe(target)) + [ambient])
    return np.array([1.0, 0.0])


def _downsample_to(image: ShadingImage, size: int) -> ShadingImage:
    if image.width <= size or image.width % size:
        return image
    return image.downsampled(image.width // size)


def _golden_min(fn, lo: float, hi: float, iters: int = 12) -> float:
    ratio = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = fn(d)
    return c if fc < fd else d


def _probe_log2_sharpness(target: ShadingImage, lobe, envlib: EnvLibrary) -> float:
    """Coarse grid + golden refinement of log2(sharpness) at a fixed lobe."""
    normals = normal_field(target.width, target.height)

    def loss(log2s: float) -> float:
        params = HighlightParams(lobe, float(2.0 ** np.clip(log2s, 0, LOG2_SHARP_MAX)))
        return pixel_rms(render_leaf(LeafFamily.HIGHLIGHT, params, normals, envlib),
                         target)

    grid = [0.5, 2.0, 3.5, 5.0, 6.5, 8.0, 8.9]
    losses = [loss(v) for v in grid]
    i = int(np.argmin(losses))
    lo = grid[max(0, i - 1)]
    hi = grid[min(len(grid) - 1, i + 1)]
    return float(_golden_min(loss, lo, hi, iters=10))


def _band_variants(params: LeafParams) -> list[LeafParams]:
    if isinstance(params, (HighlightParams, DiffRefParams)):
        return [replace(params, bands=b) for b in (None, 2, 3, 4)]
    return [params]


def fit_leaf(target: ShadingImage, family: LeafFamily, config: FitConfig,
             envlib: EnvLibrary | None = None,
             rng: np.random.Generator | None = None) -> tuple[LeafParams, float]:
    """Fit one leaf family's parameters to a target shading.

    Continuous parameters go through cma_minimize; the environment index is
    chosen by an exhaustive loop with the rotation optimized per index, and
    toon band counts are probed around the smooth optimum.  The returned
    loss is the image objective at the target's own resolution.
    """
    envlib = envlib or default_library()
    rng = rng if rng is not None else np.random.default_rng(0)
    # Sharp highlight lobes alias away under block downsampling, so that
    # family defaults to fitting at the target's own resolution.
    if family is LeafFamily.HIGHLIGHT:
        small = (target if config.highlight_fit_size is None
                 else _downsample_to(target, config.highlight_fit_size))
    else:
        small = _downsample_to(target, config.fit_size)
    normals_small = normal_field(small.width, small.height)
    normals_full = normal_field(target.width, target.height)

    def inner(params: LeafParams, normals, img: ShadingImage) -> float:
        rendered = render_leaf(family, params, normals, envlib)
        if config.pixel_only_inner:
            return pixel_rms(rendered, img)
        return objective_image(rendered, img, config.loss)

    def full_loss(params: LeafParams) -> float:
        return objective_image(render_leaf(family, params, normals_full, envlib),
                               target, config.loss)

    if family is LeafFamily.ENVREF:
        return _fit_envref(target, small, config, envlib, full_loss)

    codec = _LeafCodec(family)
    guess = _init_guess(family, target)
    if family is LeafFamily.HIGHLIGHT:
        lobe = _unit_or_default(guess[:3])
        guess[3] = _probe_log2_sharpness(target, lobe, envlib)
    x_init = codec.box.encode(guess)

    def objective(z: np.ndarray) -> float:
        return inner(codec.to_params(codec.box.decode(z)), normals_small, small)

    def full_objective(z: np.ndarray) -> float:
        return inner(codec.to_params(codec.box.decode(z)), normals_full, target)

    def prior(gen: np.random.Generator) -> np.ndarray:
        return x_init + gen.standard_normal(codec.dim) * 0.4

    result = cma_minimize(objective, codec.dim,
                          OptimizerConfig(popsize=config.popsize, sigma0=config.sigma0,
                                          max_evals=config.max_evals,
                                          restarts=config.restarts,
                                          refine_evals=config.refine_evals),
                          x0=x_init, prior=prior, rng=rng)
    x_best, f_best = result.x, full_objective(result.x)
    if config.full_polish_evals > 0:
        x_best, f_best, _ = _pattern_polish(full_objective, x_best, f_best,
                                            step=0.08, budget=config.full_polish_evals,
                                            tolx=1e-7)
    best_params = codec.to_params(codec.box.decode(x_best))
    best_loss = full_loss(best_params)
    if config.try_bands:
        for variant in _band_variants(best_params):
            loss_v = full_loss(variant)
            if loss_v < best_loss:
                best_params, best_loss = variant, loss_v
        bands = getattr(best_params, "bands", None)
        if bands is not None and config.band_polish_evals > 0:
            # The smooth optimum is only an approximation under band
            # quantization; re-optimize the continuous params with bands
            # fixed.  CMA handles the staircase landscape that stalls
            # coordinate search.
            codec_b = _LeafCodec(family, frozen=best_params)

            def banded_obj(z):
                params = codec_b.to_params(codec_b.box.decode(z))
                return inner(params, normals_small, small)

            zb = codec_b.box.encode(codec_b.from_params(best_params))
            res_b = cma_minimize(banded_obj, codec_b.dim,
                                 OptimizerConfig(sigma0=0.15,
                                                 max_evals=4 * config.band_polish_evals,
                                                 restarts=1),
                                 x0=zb, rng=rng)
            polished = codec_b.to_params(codec_b.box.decode(res_b.x))
            loss_p = full_loss(polished)
            if loss_p < best_loss:
                best_params, best_loss = polished, loss_p
    return best_params, best_loss


def quick_leaf_rmse(node: ShadingImage, normals, envlib: EnvLibrary) -> float:
    """Cheapest-possible estimate of how well any single leaf explains `node`.

    Analytic albedo, init-guess DiffRef/Highlight with a short pattern
    polish, and a coarse EnvRef grid; no CMA.  Intended for candidate
    tie-breaking, not for final fits.
    """
    mean = np.clip(node.mean_color(), 0.0, 1.0)
    best = pixel_rms(render_leaf(LeafFamily.ALBEDO, AlbedoParams(tuple(mean)),
                                 normals, envlib), node)
    for family in (LeafFamily.DIFFREF, LeafFamily.HIGHLIGHT):
        codec = _LeafCodec(family)
        guess = _init_guess(family, node)

        def obj(z):
            params = codec.to_params(codec.box.decode(z))
            return pixel_rms(render_leaf(family, params, normals, envlib), node)

        z0 = codec.box.encode(guess)
        _, f, _ = _pattern_polish(obj, z0, obj(z0), step=0.25, budget=24, tolx=1e-4)
        best = min(best, f)
        if best < 0.005:
            return best
    for index in range(len(envlib)):
        for rot in (0.0, np.pi / 2, np.pi, 3 * np.pi / 2):
            params = EnvRefParams(index, rot)
            best = min(best, pixel_rms(render_leaf(LeafFamily.ENVREF, params,
                                                   normals, envlib), node))
    return best


def _fit_envref(target: ShadingImage, small: ShadingImage, config: FitConfig,
                envlib: EnvLibrary, full_loss) -> tuple[LeafParams, float]:
    normals_small = normal_field(small.width, small.height)
    grid = np.linspace(0.0, 2.0 * np.pi, config.env_rotation_grid, endpoint=False)
    best = None
    for index in range(len(envlib)):
        for rot in grid:
            params = EnvRefParams(index, float(rot))
            loss = objective_image(render_leaf(LeafFamily.ENVREF, params,
                                               normals_small, envlib),
                                   small, config.loss)
            if best is None or loss < best[1]:
                best = (params, loss)
    params = best[0]
    # golden-section polish of the rotation around the best grid cell
    span = 2.0 * np.pi / config.env_rotation_grid
    lo, hi = params.rotation - span, params.rotation + span
    phi_ratio = (math.sqrt(5) - 1) / 2

    def rot_loss(rot: float) -> float:
        return objective_image(render_leaf(LeafFamily.ENVREF,
                                           replace(params, rotation=rot),
                                           normals_small, envlib),
                               small, config.loss)

    a, b = lo, hi
    c, d = b - phi_ratio * (b - a), a + phi_ratio * (b - a)
    fc, fd = rot_loss(c), rot_loss(d)
    for _ in range(18):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi_ratio * (b - a)
            fc = rot_loss(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi_ratio * (b - a)
            fd = rot_loss(d)
    rot_best = c if fc < fd else d
    candidate = replace(params, rotation=float(rot_best))
    if rot_loss(rot_best) < rot_loss(params.rotation):
        params = candidate
    return params, full_loss(params)


# ---------------------------------------------------------------------------
# Tree <-> vector packing for joint optimization
# ---------------------------------------------------------------------------

_MASK_LO = [-1.2, -1.2, -1.2, -1.0]
_MASK_HI = [1.2, 1.2, 1.2, 1.0]


class TreeVector:
    """Bidirectional map between a tree's continuous parameters and R^n.

    Leaf continuous parameters and HalfSpace mask parameters are packed in
    preorder.  Discrete fields (environment index or path, band counts,
    raster masks) stay frozen.  `decode(z, soft=True)` produces the
    sigmoid-relaxed masks used inside optimization loops; the final tree is
    decoded with `soft=False` (binarized, softness preserved from the
    template).
    """

    def __init__(self, tree: ShadeTree, relax_softness: float = 0.03):
        self.template = tree
        self.relax_softness = relax_softness
        self.entries: list[tuple] = []      # ("leaf", path, codec) | ("mask", path)
        lo: list[float] = []
        hi: list[float] = []
        x0: list[float] = []
        for path, node in _preorder(tree):
            if isinstance(node, Leaf):
                codec = _LeafCodec(node.family, frozen=node.params)
                self.entries.append(("leaf", path, codec))
                lo.extend(codec.box.lo)
                hi.extend(codec.box.hi)
                x0.extend(codec.from_params(node.params))
            elif isinstance(node.mask, HalfSpaceMask):
                self.entries.append(("mask", path))
                lo.extend(_MASK_LO)
                hi.extend(_MASK_HI)
                m = node.mask
                x0.extend([*m.direction, m.threshold])
        self.box = BoxSquash(lo, hi) if lo else None
        self._x0 = np.array(x0) if x0 else np.zeros(0)

    @property
    def dim(self) -> int:
        return 0 if self.box is None else self.box.dim

    def encode_current(self) -> np.ndarray:
        return self.box.encode(self._x0) if self.box is not None else np.zeros(0)

    def decode(self, z: np.ndarray, soft: bool = False) -> ShadeTree:
        x = self.box.decode(z) if self.box is not None else np.zeros(0)
        i = 0
        tree = self.template
        for entry in self.entries:
            if entry[0] == "leaf":
                _, path, codec = entry
                params = codec.to_params(x[i:i + codec.dim])
                i += codec.dim
                tree = substitute_subtree(tree, path, Leaf(codec.family, params))
            else:
                _, path = entry
                direction = _unit_or_default(x[i:i + 3], (0.0, 1.0, 0.0))
                threshold = float(np.clip(x[i + 3], -1.0, 1.0))
                i += 4
                node = _node_at(tree, path)
                if soft:
                    mask = HalfSpaceMask(direction, threshold,
                                         softness=self.relax_softness, binarize=False)
                else:
                    old = _node_at(self.template, path).mask
                    mask = HalfSpaceMask(direction, threshold,
                                         softness=old.softness, binarize=old.binarize)
                tree = substitute_subtree(tree, path, replace(node, mask=mask))
        return tree


def _preorder(tree: ShadeTree, path=()):
    yield path, tree
    if isinstance(tree, Interior):
        yield from _preorder(tree.left, path + ("L",))
        yield from _preorder(tree.right, path + ("R",))


def _node_at(tree: ShadeTree, path):
    node = tree
    for step in path:
        node = node.left if step == "L" else node.right
    return node


def refine_bands(tree: ShadeTree, target: ShadingImage, loss_cfg: FeatureLoss,
                 envlib: EnvLibrary) -> tuple[ShadeTree, float]:
    """Greedy per-leaf probe of toon band counts; keeps any improvement."""
    normals = normal_field(target.width, target.height)
    best_loss = objective_image(render_tree(tree, normals, envlib), target, loss_cfg)
    for path, leaf in list(iter_leaves(tree)):
        if not isinstance(leaf.params, (HighlightParams, DiffRefParams)):
            continue
        for variant in _band_variants(leaf.params):
            if variant == leaf.params:
                continue
            trial = substitute_subtree(tree, path, Leaf(leaf.family, variant))
            loss = objective_image(render_tree(trial, normals, envlib), target, loss_cfg)
            if loss < best_loss:
                tree, best_loss = trial, loss
    return tree, best_loss


# ---------------------------------------------------------------------------
# Substructure search (depth-ordered program synthesis)
# ---------------------------------------------------------------------------

def _skeleton_template(sk: Skeleton, target: ShadingImage,
                       envlib: EnvLibrary) -> ShadeTree:
    """Concrete tree with data-driven initial parameters for every slot."""
    if isinstance(sk, LeafSkeleton):
        fam = sk.family
        if fam is LeafFamily.ALBEDO:
            return Leaf(fam, AlbedoParams(tuple(np.clip(target.mean_color(), 0, 1))))
        if fam is LeafFamily.HIGHLIGHT:
            g = _init_guess(fam, target)
            return Leaf(fam, HighlightParams(_unit_or_default(g[:3]), 2.0 ** g[3]))
        if fam is LeafFamily.DIFFREF:
            g = _init_guess(fam, target)
            return Leaf(fam, DiffRefParams(_unit_or_default(g[:3]), float(g[3])))
        return Leaf(fam, EnvRefParams(0, 0.0))
    left = _skeleton_template(sk.left, target, envlib)
    right = _skeleton_template(sk.right, target, envlib)
    mask = None
    if sk.op is OpKind.MIX:
        mask = HalfSpaceMask((0.0, 1.0, 0.0), 0.0)
    return Interior(sk.op, left, right, mask)


def _freeze_env_indices(template: ShadeTree, target: ShadingImage,
                        envlib: EnvLibrary) -> ShadeTree:
    """Pick env indices by probing (index, coarse rotation) at the init params.

    The index stays frozen during the skeleton's CMA run; only the rotation
    remains continuous.
    """
    normals = normal_field(target.width, target.height)
    rotations = (0.0, np.pi / 2, np.pi, 3 * np.pi / 2)
    for path, leaf in list(iter_leaves(template)):
        if not isinstance(leaf.params, EnvRefParams) or leaf.params.path is not None:
            continue
        best = None
        for index in range(len(envlib)):
            for rot in rotations:
                trial = substitute_subtree(
                    template, path,
                    Leaf(leaf.family, EnvRefParams(index, rot)))
                loss = pixel_rms(render_tree(trial, normals, envlib), target)
                if best is None or loss < best[2]:
                    best = (index, rot, loss)
        template = substitute_subtree(
            template, path, Leaf(leaf.family, EnvRefParams(best[0], best[1])))
    return template


def _optimize_skeleton(template: ShadeTree, small: ShadingImage, cfg: SearchConfig,
                       envlib: EnvLibrary, rng: np.random.Generator,
                       max_evals: int, x_start: np.ndarray | None = None,
                       sigma0: float | None = None
                       ) -> tuple[np.ndarray, float, int, TreeVector]:
    vec = TreeVector(template)
    normals = normal_field(small.width, small.height)

    def objective(z: np.ndarray) -> float:
        rendered = render_tree(vec.decode(z, soft=True), normals, envlib)
        if cfg.pixel_only_inner:
            return pixel_rms(rendered, small)
        return objective_image(rendered, small, cfg.loss)

    x0 = vec.encode_current() if x_start is None else x_start
    if vec.dim == 0:
        return x0, objective(x0), 1, vec

    def prior(gen: np.random.Generator) -> np.ndarray:
        return x0 + gen.standard_normal(vec.dim) * 0.7

    result = cma_minimize(objective, vec.dim,
                          OptimizerConfig(popsize=cfg.popsize,
                                          sigma0=sigma0 or cfg.sigma0,
                                          max_evals=max_evals, restarts=2,
                                          refine_evals=0),
                          x0=x0, prior=prior, rng=rng)
    return result.x, result.f, result.evals, vec


def search_substructure(target: ShadingImage, max_depth: int, phi: float,
                        config: SearchConfig, envlib: EnvLibrary | None = None,
                        rng: np.random.Generator | None = None) -> SearchResult:
    """Depth-ordered search over all skeletons up to max_depth.

    Every skeleton is optimized in enumeration order; the first whose
    full-resolution loss drops below `phi` wins.  When the total budget
    runs out the best tree found so far is returned with stop="budget".
    """
    envlib = envlib or default_library()
    rng = rng if rng is not None else np.random.default_rng(0)
    small = _downsample_to(target, config.search_size)
    normals_full = normal_field(target.width, target.height)

    def full_loss(tree: ShadeTree) -> float:
        return objective_image(render_tree(tree, normals_full, envlib),
                               target, config.loss)

    trace: list[tuple[str, int, float, int]] = []
    evals_used = 0
    best: tuple[ShadeTree, float, str] | None = None
    best_screen = np.inf

    for sk in enumerate_structures(max_depth):
        if evals_used >= config.max_evals:
            break
        sig = skeleton_signature(sk)
        depth = skeleton_depth(sk)

        if isinstance(sk, LeafSkeleton):
            # Depth-1 skeletons get the dedicated leaf fitter (exhaustive
            # env indices, band probing) instead of the generic CMA path.
            params, loss = fit_leaf(target, sk.family, config.leaf_fit, envlib, rng)
            evals_used += config.leaf_fit.max_evals
            tree = Leaf(sk.family, params)
        else:
            template = _skeleton_template(sk, small, envlib)
            template = _freeze_env_indices(template, small, envlib)
            x, screen_loss, used, vec = _optimize_skeleton(
                template, small, config, envlib, rng, config.screen_evals)
            evals_used += used
            best_screen = min(best_screen, screen_loss)
            promoted = screen_loss <= max(config.promote_factor * best_screen,
                                          1.5 * phi)
            if promoted and evals_used < config.max_evals:
                x, skel_loss, used, vec = _optimize_skeleton(
                    template, small, config, envlib, rng, config.full_evals,
                    x_start=x)
                evals_used += used
                if (phi <= skel_loss < config.near_miss_factor * phi
                        and evals_used < config.max_evals):
                    # A near miss is worth finishing: extend the budget once
                    # at a refinement-scale step size.
                    x, _, used, vec = _optimize_skeleton(
                        template, small, config, envlib, rng,
                        config.extend_evals, x_start=x, sigma0=0.12)
                    evals_used += used
            tree = vec.decode(x, soft=False)
            if any(isinstance(leaf.params, (HighlightParams, DiffRefParams))
                   for _, leaf in iter_leaves(tree)):
                tree, _ = refine_bands(tree, small, config.loss, envlib)
                evals_used += 8
        loss = full_loss(tree)
        trace.append((sig, depth, loss, evals_used))
        if best is None or loss < best[1]:
            best = (tree, loss, sig)
        if loss < phi:
            return SearchResult(tree, loss, evals_used, "threshold", sig, trace)

    stop = "budget" if evals_used >= config.max_evals else "exhausted"
    tree, loss, sig = best
    return SearchResult(tree, loss, evals_used, stop, sig, trace)


# ---------------------------------------------------------------------------
# Whole-tree refinement
# ---------------------------------------------------------------------------

def optimize_whole_tree(tree: ShadeTree, target: ShadingImage,
                        config: SearchConfig, envlib: EnvLibrary | None = None,
                        rng: np.random.Generator | None = None,
                        max_evals: int | None = None
                        ) -> tuple[ShadeTree, float, OptimizeResult | None]:
    """Jointly refine every continuous parameter of a fixed structure.

    Returns (tree, loss, cma trace).  The loss is guaranteed not to exceed
    the input tree's loss: if the refined candidate scores worse at full
    resolution (binarized masks), the input tree is returned unchanged.
    """
    envlib = envlib or default_library()
    rng = rng if rng is not None else np.random.default_rng(0)
    small = _downsample_to(target, config.search_size)
    normals_small = normal_field(small.width, small.height)
    normals_full = normal_field(target.width, target.height)

    def full_loss(t: ShadeTree) -> float:
        return objective_image(render_tree(t, normals_full, envlib),
                               target, config.loss)

    input_loss = full_loss(tree)
    vec = TreeVector(tree)
    if vec.dim == 0:
        return tree, input_loss, None

    def objective(z: np.ndarray) -> float:
        rendered = render_tree(vec.decode(z, soft=True), normals_small, envlib)
        if config.pixel_only_inner:
            return pixel_rms(rendered, small)
        return objective_image(rendered, small, config.loss)

    x0 = vec.encode_current()

    def prior(gen: np.random.Generator) -> np.ndarray:
        return x0 + gen.standard_normal(vec.dim) * 0.25

    budget = max_evals if max_evals is not None else config.full_evals * 2
    result = cma_minimize(objective, vec.dim,
                          OptimizerConfig(popsize=config.popsize, sigma0=0.15,
                                          max_evals=budget, restarts=2,
                                          refine_evals=0),
                          x0=x0, prior=prior, rng=rng)
    candidate = vec.decode(result.x, soft=False)
    candidate, _ = refine_bands(candidate, small, config.loss, envlib)
    cand_loss = full_loss(candidate)
    if cand_loss < input_loss:
        return candidate, cand_loss, result
    return tree, input_loss, result
