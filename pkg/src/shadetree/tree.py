"""Shade-tree data model: binary compositing trees over parametric leaves.

A tree is either a Leaf (one of four shading families with continuous
parameters) or an Interior node combining two subtrees with a compositing
operation.  Mix nodes additionally carry a mask; the tree stays strictly
binary because the mask lives on the node, not as a third child (the DSL
still prints it as the third argument).

All node types are immutable values: structural edits build new trees.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterator, Union

import numpy as np

from .errors import ArityError, ParamRangeError, PathError

UNIT_TOL = 1e-6
SHARPNESS_MIN = 1.0
SHARPNESS_MAX = 512.0
TOON_BAND_CHOICES = (2, 3, 4)


class OpKind(Enum):
    MULTIPLY = "Multiply"
    SCREEN = "Screen"
    MIX = "Mix"


class LeafFamily(Enum):
    ALBEDO = "Albedo"
    DIFFREF = "DiffRef"
    ENVREF = "EnvRef"
    HIGHLIGHT = "Highlight"


# Deterministic orderings used by enumeration and tie-breaking.
OP_ORDER = (OpKind.MULTIPLY, OpKind.SCREEN, OpKind.MIX)
FAMILY_ORDER = (LeafFamily.ALBEDO, LeafFamily.DIFFREF, LeafFamily.ENVREF,
                LeafFamily.HIGHLIGHT)


def _check_unit(vec, what: str) -> tuple[float, float, float]:
    v = tuple(float(c) for c in vec)
    if len(v) != 3:
        raise ParamRangeError(f"{what} must be a 3-vector, got {vec!r}")
    norm = (v[0] ** 2 + v[1] ** 2 + v[2] ** 2) ** 0.5
    if abs(norm - 1.0) > UNIT_TOL:
        raise ParamRangeError(f"{what} must have unit norm, |{v}| = {norm:.8f}")
    return v


def unit(vec) -> tuple[float, float, float]:
    """Normalize an arbitrary non-zero 3-vector to unit length."""
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        raise ParamRangeError(f"cannot normalize zero vector {vec!r}")
    v = v / norm
    return (float(v[0]), float(v[1]), float(v[2]))


def _check_range(value: float, lo: float, hi: float, what: str) -> float:
    value = float(value)
    if not (lo <= value <= hi):
        raise ParamRangeError(f"{what} = {value} outside [{lo}, {hi}]")
    return value


def _check_bands(bands) -> int | None:
    if bands is None:
        return None
    bands = int(bands)
    if bands not in TOON_BAND_CHOICES:
        raise ParamRangeError(f"bands must be one of {TOON_BAND_CHOICES}, got {bands}")
    return bands


@dataclass(frozen=True)
class AlbedoParams:
    color: tuple[float, float, float]

    def __post_init__(self):
        c = tuple(_check_range(v, 0.0, 1.0, "albedo color channel") for v in self.color)
        object.__setattr__(self, "color", c)


@dataclass(frozen=True)
class HighlightParams:
    lobe: tuple[float, float, float]
    sharpness: float
    bands: int | None = None    # None = smooth; 2..4 = toon quantization

    def __post_init__(self):
        object.__setattr__(self, "lobe", _check_unit(self.lobe, "highlight lobe"))
        object.__setattr__(self, "sharpness",
                           _check_range(self.sharpness, SHARPNESS_MIN, SHARPNESS_MAX,
                                        "sharpness"))
        object.__setattr__(self, "bands", _check_bands(self.bands))


@dataclass(frozen=True)
class DiffRefParams:
    lobe: tuple[float, float, float]
    ambient: float
    bands: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "lobe", _check_unit(self.lobe, "diffref lobe"))
        object.__setattr__(self, "ambient", _check_range(self.ambient, 0.0, 1.0, "ambient"))
        object.__setattr__(self, "bands", _check_bands(self.bands))


@dataclass(frozen=True)
class EnvRefParams:
    """Environment reflection: either a library index or a lat-long file path."""

    env_index: int | None
    rotation: float = 0.0
    path: str | None = None

    def __post_init__(self):
        if (self.env_index is None) == (self.path is None):
            raise ParamRangeError("EnvRef needs exactly one of env_index or path")
        if self.env_index is not None and self.env_index < 0:
            raise ParamRangeError(f"env_index must be >= 0, got {self.env_index}")
        object.__setattr__(self, "rotation", float(self.rotation))


LeafParams = Union[AlbedoParams, HighlightParams, DiffRefParams, EnvRefParams]

_PARAMS_TYPE = {
    LeafFamily.ALBEDO: AlbedoParams,
    LeafFamily.HIGHLIGHT: HighlightParams,
    LeafFamily.DIFFREF: DiffRefParams,
    LeafFamily.ENVREF: EnvRefParams,
}


@dataclass(frozen=True)
class HalfSpaceMask:
    """Binary region n . dir > threshold, optionally sigmoid-relaxed."""

    direction: tuple[float, float, float]
    threshold: float
    softness: float = 0.0
    binarize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "direction", _check_unit(self.direction, "mask dir"))
        object.__setattr__(self, "threshold",
                           _check_range(self.threshold, -1.0, 1.0, "mask threshold"))
        if self.softness < 0:
            raise ParamRangeError(f"softness must be >= 0, got {self.softness}")
        object.__setattr__(self, "softness", float(self.softness))


class RasterMask:
    """Per-pixel {0,1} mask.  Immutable; equality is bitwise."""

    __slots__ = ("bitmap",)

    def __init__(self, bitmap: np.ndarray):
        bm = np.asarray(bitmap, dtype=bool).copy()
        bm.flags.writeable = False
        self.bitmap = bm

    @property
    def shape(self) -> tuple[int, int]:
        return self.bitmap.shape

    def __eq__(self, other):
        return isinstance(other, RasterMask) and np.array_equal(self.bitmap, other.bitmap)

    def __hash__(self):
        return hash((self.bitmap.shape, self.bitmap.tobytes()))

    def __repr__(self):
        h, w = self.bitmap.shape
        return f"RasterMask({w}x{h}, {int(self.bitmap.sum())} set)"

    def encode(self) -> str:
        return base64.b64encode(np.packbits(self.bitmap)).decode("ascii")

    @classmethod
    def decode(cls, width: int, height: int, data: str) -> "RasterMask":
        bits = np.unpackbits(np.frombuffer(base64.b64decode(data), dtype=np.uint8))
        if bits.size < width * height:
            raise ParamRangeError("raster mask payload too short")
        return cls(bits[: width * height].reshape(height, width).astype(bool))


MaskSpec = Union[HalfSpaceMask, RasterMask]


@dataclass(frozen=True)
class Leaf:
    family: LeafFamily
    params: LeafParams

    def __post_init__(self):
        expect = _PARAMS_TYPE[self.family]
        if not isinstance(self.params, expect):
            raise ParamRangeError(
                f"{self.family.value} leaf needs {expect.__name__}, "
                f"got {type(self.params).__name__}")


@dataclass(frozen=True)
class Interior:
    op: OpKind
    left: "ShadeTree"
    right: "ShadeTree"
    mask: MaskSpec | None = None

    def __post_init__(self):
        if self.op is OpKind.MIX and self.mask is None:
            raise ArityError("Mix node requires a mask")
        if self.op is not OpKind.MIX and self.mask is not None:
            raise ArityError(f"{self.op.value} node must not carry a mask")


ShadeTree = Union[Leaf, Interior]

Path = tuple[str, ...]          # steps "L" / "R" from the root

_STEPS = ("L", "R")


def normalize_path(path) -> Path:
    steps = []
    for s in path:
        if s in ("L", "R"):
            steps.append(s)
        elif s in (0, 1):
            steps.append(_STEPS[s])
        else:
            raise PathError(f"path step must be 'L'/'R'/0/1, got {s!r}")
    return tuple(steps)


def subtree_at(tree: ShadeTree, path) -> ShadeTree:
    node = tree
    for i, step in enumerate(normalize_path(path)):
        if not isinstance(node, Interior):
            raise PathError(f"path walks off the tree at step {i} ({step})")
        node = node.left if step == "L" else node.right
    return node


def substitute_subtree(tree: ShadeTree, path, replacement: ShadeTree) -> ShadeTree:
    """Replace the subtree addressed by path; returns a new tree."""
    steps = normalize_path(path)

    def rebuild(node: ShadeTree, i: int) -> ShadeTree:
        if i == len(steps):
            return replacement
        if not isinstance(node, Interior):
            raise PathError(f"path walks off the tree at step {i} ({steps[i]})")
        if steps[i] == "L":
            return replace(node, left=rebuild(node.left, i + 1))
        return replace(node, right=rebuild(node.right, i + 1))

    return rebuild(tree, 0)


def iter_nodes(tree: ShadeTree, path: Path = ()) -> Iterator[tuple[Path, ShadeTree]]:
    """Preorder traversal yielding (path, node)."""
    yield path, tree
    if isinstance(tree, Interior):
        yield from iter_nodes(tree.left, path + ("L",))
        yield from iter_nodes(tree.right, path + ("R",))


def iter_leaves(tree: ShadeTree) -> Iterator[tuple[Path, Leaf]]:
    for path, node in iter_nodes(tree):
        if isinstance(node, Leaf):
            yield path, node


def node_count(tree: ShadeTree) -> int:
    if isinstance(tree, Leaf):
        return 1
    return 1 + node_count(tree.left) + node_count(tree.right)


def tree_depth(tree: ShadeTree) -> int:
    """Leaf = 1; interior = 1 + max child depth."""
    if isinstance(tree, Leaf):
        return 1
    return 1 + max(tree_depth(tree.left), tree_depth(tree.right))


def quantize(value: float, sig: int = 6) -> float:
    """Round to `sig` significant digits (the DSL serialization precision)."""
    return float(f"{float(value):.{sig}g}")


def quantize_tree(tree: ShadeTree, sig: int = 6) -> ShadeTree:
    """Round every continuous parameter so DSL round trips are lossless."""

    def q3(v):
        # Rounding an exactly-unit vector at >= 6 significant digits moves its
        # norm by at most ~8.7e-7, inside the 1e-6 unit tolerance, so unit
        # vectors are rounded like any other value (re-normalizing would
        # reintroduce full-precision components and break DSL round trips).
        return tuple(quantize(c, sig) for c in v)

    if isinstance(tree, Leaf):
        p = tree.params
        if isinstance(p, AlbedoParams):
            p = AlbedoParams(q3(p.color))
        elif isinstance(p, HighlightParams):
            p = HighlightParams(q3(p.lobe), quantize(p.sharpness, sig), p.bands)
        elif isinstance(p, DiffRefParams):
            p = DiffRefParams(q3(p.lobe), quantize(p.ambient, sig), p.bands)
        elif isinstance(p, EnvRefParams):
            p = EnvRefParams(p.env_index, quantize(p.rotation, sig), p.path)
        return Leaf(tree.family, p)
    mask = tree.mask
    if isinstance(mask, HalfSpaceMask):
        mask = HalfSpaceMask(q3(mask.direction), quantize(mask.threshold, sig),
                             quantize(mask.softness, sig), mask.binarize)
    return Interior(tree.op, quantize_tree(tree.left, sig),
                    quantize_tree(tree.right, sig), mask)


# ---------------------------------------------------------------------------
# JSON encoding (the service/UI wire format)
# ---------------------------------------------------------------------------

def params_to_json(params: LeafParams) -> dict:
    if isinstance(params, AlbedoParams):
        return {"color": list(params.color)}
    if isinstance(params, HighlightParams):
        d = {"lobe": list(params.lobe), "sharpness": params.sharpness}
        if params.bands is not None:
            d["bands"] = params.bands
        return d
    if isinstance(params, DiffRefParams):
        d = {"lobe": list(params.lobe), "ambient": params.ambient}
        if params.bands is not None:
            d["bands"] = params.bands
        return d
    if isinstance(params, EnvRefParams):
        if params.path is not None:
            return {"path": params.path, "rotation": params.rotation}
        return {"env_index": params.env_index, "rotation": params.rotation}
    raise TypeError(f"unknown params {params!r}")


def params_from_json(family: LeafFamily, data: dict) -> LeafParams:
    if family is LeafFamily.ALBEDO:
        return AlbedoParams(tuple(data["color"]))
    if family is LeafFamily.HIGHLIGHT:
        return HighlightParams(tuple(data["lobe"]), data["sharpness"], data.get("bands"))
    if family is LeafFamily.DIFFREF:
        return DiffRefParams(tuple(data["lobe"]), data["ambient"], data.get("bands"))
    if family is LeafFamily.ENVREF:
        return EnvRefParams(data.get("env_index"), data.get("rotation", 0.0),
                            data.get("path"))
    raise TypeError(f"unknown family {family!r}")


def mask_to_json(mask: MaskSpec) -> dict:
    if isinstance(mask, HalfSpaceMask):
        return {"kind": "halfspace", "dir": list(mask.direction), "t": mask.threshold,
                "softness": mask.softness, "binarize": mask.binarize}
    h, w = mask.shape
    return {"kind": "raster", "w": w, "h": h, "data": mask.encode()}


def mask_from_json(data: dict) -> MaskSpec:
    if data["kind"] == "halfspace":
        return HalfSpaceMask(tuple(data["dir"]), data["t"],
                             data.get("softness", 0.0), data.get("binarize", True))
    if data["kind"] == "raster":
        return RasterMask.decode(data["w"], data["h"], data["data"])
    raise ParamRangeError(f"unknown mask kind {data.get('kind')!r}")


def tree_to_json(tree: ShadeTree) -> dict:
    if isinstance(tree, Leaf):
        return {"leaf": tree.family.value, "params": params_to_json(tree.params)}
    out = {"op": tree.op.value,
           "children": [tree_to_json(tree.left), tree_to_json(tree.right)]}
    if tree.mask is not None:
        out["mask"] = mask_to_json(tree.mask)
    return out


def tree_from_json(data: dict) -> ShadeTree:
    if "leaf" in data:
        family = LeafFamily(data["leaf"])
        return Leaf(family, params_from_json(family, data["params"]))
    if "op" not in data:
        raise ParamRangeError("tree JSON needs 'leaf' or 'op'")
    op = OpKind(data["op"])
    children = data.get("children", [])
    if len(children) != 2:
        raise ArityError(f"{op.value} node needs exactly 2 children, got {len(children)}")
    mask = mask_from_json(data["mask"]) if data.get("mask") is not None else None
    return Interior(op, tree_from_json(children[0]), tree_from_json(children[1]), mask)
