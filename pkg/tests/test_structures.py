import itertools

import pytest

from shadetree.structures import (InteriorSkeleton, LeafSkeleton, count_structures,
                                  enumerate_structures, leaf_slots, mix_slots,
                                  skeleton_depth, skeleton_signature)
from shadetree.tree import FAMILY_ORDER, OP_ORDER


def brute_force_skeletons(max_depth):
    """Independent enumerator: grow all derivations, then sort by (depth, lex)."""
    by_depth = {1: [LeafSkeleton(f) for f in FAMILY_ORDER]}
    for d in range(2, max_depth + 1):
        shallower = list(itertools.chain.from_iterable(
            by_depth[k] for k in range(1, d)))
        out = []
        for op in OP_ORDER:
            for left in shallower:
                for right in shallower:
                    sk = InteriorSkeleton(op, left, right)
                    if skeleton_depth(sk) == d:
                        out.append(sk)
        by_depth[d] = out
    return by_depth


class TestCounts:
    def test_depth_one_is_four(self):
        assert len(list(enumerate_structures(1))) == 4

    def test_depth_two_is_52(self):
        skeletons = list(enumerate_structures(2))
        assert len(skeletons) == 52
        brute = brute_force_skeletons(2)
        assert len(brute[1]) + len(brute[2]) == 52

    def test_matches_brute_force_to_depth_three(self):
        ours = list(enumerate_structures(3))
        brute = brute_force_skeletons(3)
        flat = brute[1] + brute[2] + brute[3]
        assert len(ours) == len(flat) == count_structures(3) == 8116
        assert set(map(skeleton_signature, ours)) == set(map(skeleton_signature, flat))

    def test_closed_form_recurrence(self):
        # N(1)=4, N(d)=N(d-1)+3*(C(d-1)^2-C(d-2)^2)
        assert count_structures(1) == 4
        assert count_structures(2) == 52
        assert count_structures(3) == 52 + 3 * (52 ** 2 - 4 ** 2)


class TestOrdering:
    def test_depth_monotone(self):
        depths = [skeleton_depth(s) for s in enumerate_structures(3)]
        assert depths == sorted(depths)

    def test_leaves_first(self):
        skeletons = list(enumerate_structures(2))
        assert all(isinstance(s, LeafSkeleton) for s in skeletons[:4])
        assert all(isinstance(s, InteriorSkeleton) for s in skeletons[4:])

    def test_lexicographic_within_depth(self):
        skeletons = list(enumerate_structures(2))[4:]
        ops = [s.op for s in skeletons]
        # Multiply block, then Screen, then Mix
        boundaries = [ops.index(op) for op in OP_ORDER]
        assert boundaries == sorted(boundaries)
        for op, group in itertools.groupby(skeletons, key=lambda s: s.op):
            group = list(group)
            keys = [(FAMILY_ORDER.index(s.left.family),
                     FAMILY_ORDER.index(s.right.family)) for s in group]
            assert keys == sorted(keys)

    def test_generator_is_lazy(self):
        gen = enumerate_structures(6)
        first = [next(gen) for _ in range(60)]
        assert len(first) == 60  # no blow-up materializing depth 6

    def test_invalid_depth(self):
        with pytest.raises(ValueError):
            list(enumerate_structures(0))


class TestSlots:
    def test_leaf_slots_preorder(self):
        sk = InteriorSkeleton(OP_ORDER[0],
                              LeafSkeleton(FAMILY_ORDER[3]),
                              LeafSkeleton(FAMILY_ORDER[0]))
        assert [f.value for f in leaf_slots(sk)] == ["Highlight", "Albedo"]

    def test_mix_slots_counted(self):
        from shadetree.tree import OpKind

        sk = InteriorSkeleton(OpKind.MIX,
                              InteriorSkeleton(OpKind.MIX,
                                               LeafSkeleton(FAMILY_ORDER[0]),
                                               LeafSkeleton(FAMILY_ORDER[0])),
                              LeafSkeleton(FAMILY_ORDER[1]))
        assert mix_slots(sk) == 2
