"""Synthetic dataset generation: random trees, rendered pairs, analogy quadruples.

Two styles ship: "realistic" (smooth Highlight/DiffRef lobes) and "toon"
(the same leaves quantized into 2-4 intensity bands).  Base-node parameter
ranges are split so the test ranges are disjoint from the train ranges on
every material field (color channels, lobe polar angle, sharpness,
ambient, environment indices); pose-like fields (azimuth, environment
rotation, mask geometry) are shared.  The manifest records the ranges and
sampling weights, so the disjointness is machine-checkable.

Every continuous parameter is quantized to 6 significant digits at
sampling time, which makes the `.shadetree` serialization lossless and
ground-truth pairs re-render byte-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsl import print_tree
from .envmap import EnvLibrary, default_library
from .image import normal_field, save_png, to_uint8
from .render import render_tree
from .tree import (AlbedoParams, DiffRefParams, EnvRefParams, HalfSpaceMask,
                   HighlightParams, Interior, Leaf, LeafFamily, OpKind, ShadeTree,
                   quantize_tree, subtree_at, substitute_subtree, tree_to_json, unit)

__all__ = ["DatasetSpec", "SamplingWeights", "AnalogyQuadruple", "sample_tree",
           "sample_leaf", "generate_dataset", "generate_analogy_set",
           "write_analogy_set", "split_ranges"]

STYLES = ("realistic", "toon")
SPLITS = ("train", "test")

# Material parameter ranges.  The fields listed in DISJOINT_FIELDS carry the
# train/test disjointness contract.
RANGES = {
    "train": {
        "albedo_channel": (0.30, 0.52),
        "polar_deg": (5.0, 35.0),
        "log2_sharpness": (4.0, 6.6),
        "ambient": (0.05, 0.30),
        "env_indices": [0, 1, 2, 3],
    },
    "test": {
        "albedo_channel": (0.60, 0.85),
        "polar_deg": (40.0, 65.0),
        "log2_sharpness": (7.0, 8.6),
        "ambient": (0.35, 0.60),
        "env_indices": [4, 5, 6, 7],
    },
}
DISJOINT_FIELDS = ("albedo_channel", "polar_deg", "log2_sharpness", "ambient",
                   "env_indices")
SHARED_RANGES = {
    "azimuth": (0.0, 2.0 * math.pi),
    "env_rotation": (0.0, 2.0 * math.pi),
    "mask_threshold": (-0.5, 0.5),
    "toon_bands": [2, 3, 4],
}


def split_ranges(split: str) -> dict:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return RANGES[split]


@dataclass(frozen=True)
class SamplingWeights:
    """Production priors for the recursive grammar sampler.

    Interior probability decays with depth so deep degenerate trees stay
    rare; at max_depth the leaf production is forced.
    """

    interior_base: float = 0.85
    interior_decay: float = 0.55
    op_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    family_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def interior_prob(self, depth: int, max_depth: int) -> float:
        if depth >= max_depth:
            return 0.0
        return self.interior_base * self.interior_decay ** (depth - 1)


@dataclass(frozen=True)
class DatasetSpec:
    style: str = "realistic"
    count: int = 10
    max_depth: int = 4
    seed: int = 0
    split: str = "test"
    size: int = 128
    weights: SamplingWeights = field(default_factory=SamplingWeights)

    def __post_init__(self):
        if self.style not in STYLES:
            raise ValueError(f"style must be one of {STYLES}, got {self.style!r}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not (1 <= self.max_depth <= 6):
            raise ValueError("max_depth must be in [1, 6]")


def _sample_lobe(rng: np.random.Generator, ranges: dict) -> tuple[float, float, float]:
    lo, hi = ranges["polar_deg"]
    polar = math.radians(rng.uniform(lo, hi))
    azimuth = rng.uniform(*SHARED_RANGES["azimuth"])
    return unit((math.sin(polar) * math.cos(azimuth),
                 math.sin(polar) * math.sin(azimuth),
                 math.cos(polar)))


def sample_leaf(family: LeafFamily, split: str, style: str,
                rng: np.random.Generator) -> Leaf:
    ranges = split_ranges(split)
    bands = None
    if style == "toon":
        bands = int(rng.choice(SHARED_RANGES["toon_bands"]))
    if family is LeafFamily.ALBEDO:
        lo, hi = ranges["albedo_channel"]
        params = AlbedoParams(tuple(rng.uniform(lo, hi, 3)))
    elif family is LeafFamily.HIGHLIGHT:
        params = HighlightParams(_sample_lobe(rng, ranges),
                                 2.0 ** rng.uniform(*ranges["log2_sharpness"]),
                                 bands)
    elif family is LeafFamily.DIFFREF:
        params = DiffRefParams(_sample_lobe(rng, ranges),
                               rng.uniform(*ranges["ambient"]), bands)
    else:
        params = EnvRefParams(int(rng.choice(ranges["env_indices"])),
                              rng.uniform(*SHARED_RANGES["env_rotation"]))
    return Leaf(family, params)


def _sample_mask(rng: np.random.Generator) -> HalfSpaceMask:
    direction = unit(rng.standard_normal(3))
    threshold = rng.uniform(*SHARED_RANGES["mask_threshold"])
    return HalfSpaceMask(direction, threshold)


def sample_tree(spec: DatasetSpec, rng: np.random.Generator) -> ShadeTree:
    """Draw one tree by recursive production choice; deterministic per rng state."""
    w = spec.weights
    families = list(LeafFamily)
    ops = list(OpKind)

    def grow(depth: int) -> ShadeTree:
        if rng.uniform() < w.interior_prob(depth, spec.max_depth):
            op = ops[rng.choice(len(ops), p=w.op_weights)]
            left = grow(depth + 1)
            right = grow(depth + 1)
            mask = _sample_mask(rng) if op is OpKind.MIX else None
            return Interior(op, left, right, mask)
        family = families[rng.choice(len(families), p=w.family_weights)]
        return sample_leaf(family, spec.split, spec.style, rng)

    return quantize_tree(grow(1))


def _render(tree: ShadeTree, size: int, envlib: EnvLibrary):
    return render_tree(tree, normal_field(size, size), envlib)


def _visually_trivial(tree: ShadeTree, size: int, envlib: EnvLibrary,
                      threshold: float = 0.01) -> bool:
    """True when either root child renders nearly identically to the root."""
    if isinstance(tree, Leaf):
        return False
    root = _render(tree, size, envlib)
    for child in (tree.left, tree.right):
        img = _render(child, size, envlib)
        mad = float(np.abs(root.rgb[root.valid] - img.rgb[root.valid]).mean())
        if mad < threshold:
            return True
    return False


def sample_nontrivial_tree(spec: DatasetSpec, rng: np.random.Generator,
                           envlib: EnvLibrary, max_tries: int = 50) -> ShadeTree:
    tree = sample_tree(spec, rng)
    for _ in range(max_tries):
        if not _visually_trivial(tree, min(spec.size, 64), envlib):
            return tree
        tree = sample_tree(spec, rng)
    return tree


def generate_dataset(spec: DatasetSpec, out_dir, envlib: EnvLibrary | None = None) -> dict:
    """Write (PNG, .shadetree, JSON) triples plus a manifest; returns the manifest."""
    envlib = envlib or default_library()
    base = Path(out_dir) / spec.style / spec.split
    base.mkdir(parents=True, exist_ok=True)
    entries = []
    for index in range(spec.count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
        tree = sample_nontrivial_tree(spec, rng, envlib)
        sample_id = f"{index:05d}"
        image = _render(tree, spec.size, envlib)
        save_png(image, base / f"{sample_id}.png")
        (base / f"{sample_id}.shadetree").write_text(print_tree(tree) + "\n")
        (base / f"{sample_id}.json").write_text(
            json.dumps(tree_to_json(tree), indent=2) + "\n")
        entries.append({"id": sample_id, "depth": _tree_depth(tree),
                        "files": {k: f"{sample_id}.{k}"
                                  for k in ("png", "shadetree", "json")}})
    manifest = {
        "style": spec.style,
        "split": spec.split,
        "seed": spec.seed,
        "count": spec.count,
        "max_depth": spec.max_depth,
        "size": spec.size,
        "weights": {
            "interior_base": spec.weights.interior_base,
            "interior_decay": spec.weights.interior_decay,
            "op_weights": list(spec.weights.op_weights),
            "family_weights": list(spec.weights.family_weights),
        },
        "ranges": {s: _jsonable_ranges(RANGES[s]) for s in SPLITS},
        "disjoint_fields": list(DISJOINT_FIELDS),
        "shared_ranges": _jsonable_ranges(SHARED_RANGES),
        "entries": entries,
    }
    (base / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _jsonable_ranges(ranges: dict) -> dict:
    return {k: list(v) if isinstance(v, (tuple, list)) else v
            for k, v in ranges.items()}


def _tree_depth(tree: ShadeTree) -> int:
    if isinstance(tree, Leaf):
        return 1
    return 1 + max(_tree_depth(tree.left), _tree_depth(tree.right))


# ---------------------------------------------------------------------------
# Visual shading editing analogy
# ---------------------------------------------------------------------------

EDIT_KINDS = ("swap-albedo", "swap-highlight", "swap-diffuse-subtree")

# Structure underlying every quadruple: albedo * diffuse, screened with a
# highlight.  Every edit kind addresses one slot of it.
_EDIT_PATHS = {
    "swap-albedo": ("L", "L"),
    "swap-highlight": ("R",),
    "swap-diffuse-subtree": ("L",),
}


@dataclass(frozen=True)
class AnalogyQuadruple:
    source: ShadeTree           # A
    edited: ShadeTree           # A' = A with the replacement applied
    test_source: ShadeTree      # B (same structure as A, fresh parameters)
    test_edited: ShadeTree      # B' = B with the same replacement (ground truth)
    edit_kind: str
    edit_path: tuple[str, ...]


def _template_tree(split: str, style: str, rng: np.random.Generator) -> ShadeTree:
    albedo = sample_leaf(LeafFamily.ALBEDO, split, style, rng)
    diffuse = sample_leaf(LeafFamily.DIFFREF, split, style, rng)
    highlight = sample_leaf(LeafFamily.HIGHLIGHT, split, style, rng)
    return Interior(OpKind.SCREEN,
                    Interior(OpKind.MULTIPLY, albedo, diffuse, None),
                    highlight, None)


def _sample_replacement(kind: str, split: str, style: str,
                        rng: np.random.Generator) -> ShadeTree:
    if kind == "swap-albedo":
        return sample_leaf(LeafFamily.ALBEDO, split, style, rng)
    if kind == "swap-highlight":
        return sample_leaf(LeafFamily.HIGHLIGHT, split, style, rng)
    return Interior(OpKind.MULTIPLY,
                    sample_leaf(LeafFamily.ALBEDO, split, style, rng),
                    sample_leaf(LeafFamily.DIFFREF, split, style, rng), None)


def generate_analogy_set(spec: DatasetSpec, count: int,
                         include_identity: bool = False) -> list[AnalogyQuadruple]:
    """Build editing-analogy quadruples (A, A', B, B') with ground truth.

    With include_identity, every fourth quadruple applies a no-op edit
    (the replacement equals the original subtree), so A' = A and B' = B.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    quads = []
    for index in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7000 + index]))
        kind = EDIT_KINDS[index % len(EDIT_KINDS)]
        path = _EDIT_PATHS[kind]
        a = quantize_tree(_template_tree(spec.split, spec.style, rng))
        b = quantize_tree(_template_tree(spec.split, spec.style, rng))
        identity = include_identity and index % 4 == 3
        if identity:
            replacement = subtree_at(a, path)
            kind = "identity"
        else:
            replacement = quantize_tree(
                _sample_replacement(kind, spec.split, spec.style, rng))
        quads.append(AnalogyQuadruple(
            source=a,
            edited=substitute_subtree(a, path, replacement),
            test_source=b,
            test_edited=substitute_subtree(b, path, replacement),
            edit_kind=kind,
            edit_path=path,
        ))
    return quads


def write_analogy_set(quads: list[AnalogyQuadruple], out_dir, size: int = 128,
                      envlib: EnvLibrary | None = None) -> dict:
    envlib = envlib or default_library()
    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    entries = []
    names = {"source": "a", "edited": "a_edit", "test_source": "b",
             "test_edited": "b_truth"}
    for index, quad in enumerate(quads):
        qdir = base / f"quad_{index:04d}"
        qdir.mkdir(exist_ok=True)
        for attr, stem in names.items():
            tree = getattr(quad, attr)
            save_png(_render(tree, size, envlib), qdir / f"{stem}.png")
            (qdir / f"{stem}.shadetree").write_text(print_tree(tree) + "\n")
        (qdir / "quad.json").write_text(json.dumps({
            "edit_kind": quad.edit_kind,
            "edit_path": list(quad.edit_path),
        }, indent=2) + "\n")
        entries.append({"id": f"quad_{index:04d}", "edit_kind": quad.edit_kind})
    manifest = {"count": len(quads), "size": size, "entries": entries}
    (base / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
