"""shadetree: shade-tree DSL, sphere-shading renderer, and inverse decomposition."""

__version__ = "0.1.0"

from .tree import (AlbedoParams, DiffRefParams, EnvRefParams, HalfSpaceMask,
                   HighlightParams, Interior, Leaf, LeafFamily, OpKind,
                   RasterMask, ShadeTree, substitute_subtree, subtree_at,
                   tree_from_json, tree_to_json)
from .dsl import parse_tree, print_tree
from .image import ShadingImage, load_png, save_png
from .render import render_tree, render_tree_size

__all__ = [
    "AlbedoParams", "DiffRefParams", "EnvRefParams", "HalfSpaceMask",
    "HighlightParams", "Interior", "Leaf", "LeafFamily", "OpKind",
    "RasterMask", "ShadeTree", "ShadingImage", "load_png", "parse_tree",
    "print_tree", "render_tree", "render_tree_size", "save_png",
    "substitute_subtree", "subtree_at", "tree_from_json", "tree_to_json",
    "__version__",
]
