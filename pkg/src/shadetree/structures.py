"""Structure skeletons: shade trees with unbound parameters.

The stage-2 search enumerates every skeleton up to a depth bound, strictly
ordered by depth (all depth-1 skeletons before any depth-2 skeleton, and so
on).  Within one depth the order is lexicographic over (op, left, right)
with ops ordered Multiply < Screen < Mix and leaves ordered Albedo <
DiffRef < EnvRef < Highlight.

Counts follow N(1) = 4 and, with C(d) the cumulative count at depth <= d,
N(d) = 3 * (C(d-1)^2 - C(d-2)^2): 4 at depth 1, 48 at depth 2, 8064 at
depth 3.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Union

from .tree import (FAMILY_ORDER, OP_ORDER, Interior, Leaf, LeafFamily, OpKind,
                   ShadeTree)

__all__ = ["LeafSkeleton", "InteriorSkeleton", "Skeleton", "skeleton_depth",
           "leaf_slots", "mix_slots", "enumerate_structures", "count_structures",
           "skeleton_signature", "skeleton_of"]


@dataclass(frozen=True)
class LeafSkeleton:
    family: LeafFamily


@dataclass(frozen=True)
class InteriorSkeleton:
    op: OpKind
    left: "Skeleton"
    right: "Skeleton"


Skeleton = Union[LeafSkeleton, InteriorSkeleton]


def skeleton_depth(sk: Skeleton) -> int:
    if isinstance(sk, LeafSkeleton):
        return 1
    return 1 + max(skeleton_depth(sk.left), skeleton_depth(sk.right))


def leaf_slots(sk: Skeleton) -> list[LeafFamily]:
    """Leaf families in preorder; the parameter-binding order."""
    if isinstance(sk, LeafSkeleton):
        return [sk.family]
    return leaf_slots(sk.left) + leaf_slots(sk.right)


def mix_slots(sk: Skeleton) -> int:
    """Number of Mix nodes (each needs a mask bound), preorder count."""
    if isinstance(sk, LeafSkeleton):
        return 0
    own = 1 if sk.op is OpKind.MIX else 0
    return own + mix_slots(sk.left) + mix_slots(sk.right)


def skeleton_signature(sk: Skeleton) -> str:
    if isinstance(sk, LeafSkeleton):
        return sk.family.value
    return f"{sk.op.value}({skeleton_signature(sk.left)},{skeleton_signature(sk.right)})"


def skeleton_of(tree: ShadeTree) -> Skeleton:
    """Strip parameters from a concrete tree."""
    if isinstance(tree, Leaf):
        return LeafSkeleton(tree.family)
    return InteriorSkeleton(tree.op, skeleton_of(tree.left), skeleton_of(tree.right))


def enumerate_structures(max_depth: int) -> Iterator[Skeleton]:
    """Yield every skeleton of depth <= max_depth in canonical order.

    The generator materializes one depth layer at a time, so callers that
    stop early (threshold hit, budget out) never pay for deeper layers.
    """
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")
    layer = [LeafSkeleton(f) for f in FAMILY_ORDER]   # depth exactly 1
    yield from layer
    shallower: list[Skeleton] = []                    # depth <= d-2
    for _ in range(2, max_depth + 1):
        prev_all = shallower + layer                  # depth <= d-1
        cut = len(shallower)                          # first index of depth d-1
        new_layer = []
        for op in OP_ORDER:
            for i, left in enumerate(prev_all):
                for j, right in enumerate(prev_all):
                    # depth == d requires at least one child of depth d-1
                    if i < cut and j < cut:
                        continue
                    sk = InteriorSkeleton(op, left, right)
                    new_layer.append(sk)
                    yield sk
        shallower = prev_all
        layer = new_layer


def count_structures(max_depth: int) -> int:
    """Closed-form cumulative count C(d); C(1)=4, C(d)=C(d-1)+3*(C(d-1)^2-C(d-2)^2)."""
    prev, cur = 0, 4
    for _ in range(2, max_depth + 1):
        prev, cur = cur, cur + 3 * (cur * cur - prev * prev)
    return cur
