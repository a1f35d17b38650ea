import math

import numpy as np
import pytest

from shadetree.envmap import default_library
from shadetree.image import ShadingImage, normal_field, sphere_mask
from shadetree.tree import (AlbedoParams, DiffRefParams, EnvRefParams,
                            HalfSpaceMask, HighlightParams, Interior, Leaf,
                            LeafFamily, OpKind, quantize_tree, unit)


@pytest.fixture(scope="session")
def envlib():
    return default_library()


@pytest.fixture(scope="session")
def normals128():
    return normal_field(128, 128)


@pytest.fixture(scope="session")
def normals64():
    return normal_field(64, 64)


def random_image(rng, size=64) -> ShadingImage:
    return ShadingImage(rng.uniform(0.0, 1.0, (size, size, 3)))


def random_unit(rng):
    v = rng.standard_normal(3)
    return unit(v)


def random_leaf(rng, envs=8) -> Leaf:
    family = rng.choice(list(LeafFamily))
    if family is LeafFamily.ALBEDO:
        return Leaf(family, AlbedoParams(tuple(rng.uniform(0, 1, 3))))
    if family is LeafFamily.HIGHLIGHT:
        return Leaf(family, HighlightParams(random_unit(rng),
                                            float(2 ** rng.uniform(0, 9))))
    if family is LeafFamily.DIFFREF:
        return Leaf(family, DiffRefParams(random_unit(rng),
                                          float(rng.uniform(0, 1))))
    return Leaf(family, EnvRefParams(int(rng.integers(0, envs)),
                                     float(rng.uniform(0, 2 * math.pi))))


def random_tree(rng, max_depth=4, p_interior=0.6, envs=8):
    """Quantized random tree for round-trip and structural tests."""

    def grow(depth):
        if depth < max_depth and rng.uniform() < p_interior:
            op = rng.choice(list(OpKind))
            mask = None
            if op is OpKind.MIX:
                mask = HalfSpaceMask(random_unit(rng), float(rng.uniform(-1, 1)))
            return Interior(op, grow(depth + 1), grow(depth + 1), mask)
        return random_leaf(rng, envs)

    return quantize_tree(grow(1))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def valid_fraction_mask(size):
    return sphere_mask(size, size)
