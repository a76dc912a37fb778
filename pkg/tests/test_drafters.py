"""Tests for synthetic drafter distributions and iteration schedules."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from specsim.drafters import (
    BlockGenerator,
    FlatDrafter,
    GeometricDrafter,
    StationaryGenerator,
    drafter_from_dict,
    generator_from_dict,
)
from specsim.errors import ConfigError
from specsim.token_tree import new_tree


class TestGeometricDrafter:
    def test_root_carries_top_mass(self):
        drafter = GeometricDrafter(top_mass=0.9, decay=0.8)
        token, prob = drafter.root()
        assert prob == 0.9

    def test_candidates_descend_and_stay_within_mass(self):
        drafter = GeometricDrafter(top_mass=0.9, decay=0.8, fanout=8, top_share=0.7)
        tree = new_tree(*drafter.root())
        candidates = drafter.candidates(tree, 0, 8)
        assert len(candidates) == 8
        probs = [p for _, p in candidates]
        assert probs == sorted(probs, reverse=True)
        assert sum(probs) <= 0.9 * 0.8 + 1e-12

    def test_candidates_decay_with_depth(self):
        drafter = GeometricDrafter(top_mass=0.9, decay=0.5)
        tree = new_tree(*drafter.root())
        child = tree.add_child(0, token=1, prob=0.5)
        top_at_1 = drafter.candidates(tree, 0, 1)[0][1]
        top_at_2 = drafter.candidates(tree, child, 1)[0][1]
        assert top_at_2 == pytest.approx(top_at_1 * 0.5)

    def test_fanout_caps_candidate_count(self):
        drafter = GeometricDrafter(top_mass=0.9, decay=0.8, fanout=3)
        tree = new_tree(*drafter.root())
        assert len(drafter.candidates(tree, 0, 16)) == 3

    def test_chain_expected_length_oracle(self):
        # Spell the recurrence out: each link multiplies the running path
        # probability by the top candidate at that depth.
        drafter = GeometricDrafter(top_mass=0.8, decay=0.9, top_share=0.7)
        path = 0.8
        expected = 1.0 + path
        for depth in (1, 2):
            path *= 0.8 * 0.9**depth * 0.7
            expected += path
        assert drafter.chain_expected_length(3) == pytest.approx(expected)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"top_mass": 0.0, "decay": 0.8},
            {"top_mass": 1.1, "decay": 0.8},
            {"top_mass": 0.9, "decay": 0.0},
            {"top_mass": 0.9, "decay": 0.8, "fanout": 0},
            {"top_mass": 0.9, "decay": 0.8, "top_share": 1.0},
        ],
    )
    def test_rejects_bad_parameters(self, kwargs):
        with pytest.raises(ValueError):
            GeometricDrafter(**kwargs)

    @given(
        top_mass=st.floats(0.1, 1.0),
        decay=st.floats(0.1, 1.0),
        depth=st.integers(0, 6),
    )
    def test_candidate_mass_never_exceeds_one(self, top_mass, decay, depth):
        drafter = GeometricDrafter(top_mass=top_mass, decay=decay)
        tree = new_tree(*drafter.root())
        node = 0
        for _ in range(depth):
            node = tree.add_child(node, token=1, prob=0.5)
        total = sum(p for _, p in drafter.candidates(tree, node, 8))
        assert total <= 1.0 + 1e-12


class TestFlatDrafter:
    def test_uniform_shares(self):
        drafter = FlatDrafter(mass=0.8, fanout=4)
        tree = new_tree(*drafter.root())
        candidates = drafter.candidates(tree, 0, 4)
        assert [p for _, p in candidates] == [0.2, 0.2, 0.2, 0.2]

    def test_root_is_certain(self):
        assert FlatDrafter().root()[1] == 1.0


class TestGenerators:
    def test_stationary_repeats_one_drafter(self):
        drafter = GeometricDrafter(top_mass=0.9, decay=0.8)
        gen = StationaryGenerator(drafter)
        assert gen.drafter_at(0) is drafter
        assert gen.drafter_at(999) is drafter
        assert gen.regimes() == [drafter]

    def test_blocks_cycle_in_order(self):
        easy = GeometricDrafter(top_mass=0.95, decay=0.95)
        hard = GeometricDrafter(top_mass=0.5, decay=0.5)
        gen = BlockGenerator(regimes=(easy, hard), block_len=3)
        picks = [gen.drafter_at(i) for i in range(8)]
        assert picks == [easy, easy, easy, hard, hard, hard, easy, easy]

    def test_blocks_require_positive_length(self):
        with pytest.raises(ValueError):
            BlockGenerator(regimes=(GeometricDrafter(0.9, 0.8),), block_len=0)


class TestSerialization:
    def test_geometric_round_trip_by_signature(self):
        spec = {"variant": "geometric", "top_mass": 0.85, "decay": 0.9}
        assert drafter_from_dict(spec).signature()[0] == "geometric"

    def test_flat_variant(self):
        assert drafter_from_dict({"variant": "flat", "fanout": 4}).fanout == 4

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            drafter_from_dict({"variant": "oracle"})

    def test_stationary_generator_from_dict(self):
        gen = generator_from_dict(
            {
                "variant": "stationary",
                "drafter": {"variant": "geometric", "top_mass": 0.9, "decay": 0.8},
            }
        )
        assert isinstance(gen, StationaryGenerator)

    def test_block_generator_from_dict(self):
        gen = generator_from_dict(
            {
                "variant": "blocks",
                "block_len": 5,
                "regimes": [
                    {"variant": "geometric", "top_mass": 0.9, "decay": 0.8},
                    {"variant": "flat"},
                ],
            }
        )
        assert isinstance(gen, BlockGenerator)
        assert gen.block_len == 5

    def test_generator_missing_fields_rejected(self):
        with pytest.raises(ConfigError):
            generator_from_dict({"variant": "stationary"})
        with pytest.raises(ConfigError):
            generator_from_dict({"variant": "warp", "drafter": {}})
