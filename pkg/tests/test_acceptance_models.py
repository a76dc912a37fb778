"""Tests for acceptance models, expected accepted length, and sampling."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specsim.acceptance import (
    DepthDecayAcceptance,
    ExplicitAcceptance,
    SurrogateAcceptance,
    expected_accepted_length,
    freeze_probs,
    model_from_dict,
    path_accept_prob,
    path_products,
    sample_accepted_lengths,
    sample_verification,
    sample_with_probs,
)
from specsim.errors import ConfigError
from specsim.token_tree import TokenTree, new_tree


def expected_len_by_enumeration(tree: TokenTree, probs: np.ndarray) -> float:
    """Oracle: enumerate every verification outcome and sum len * prob.

    The walk starts above the root, so the first decision is whether the
    root itself is accepted.  Descendants of a rejected node contribute
    nothing.  Runs in time linear in the number of root paths, which is
    fine for the small trees used here.
    """

    def walk(children: list[int]) -> float:
        # Expected number of accepted nodes below this point.
        total = 0.0
        for child in children:
            p = float(probs[child])
            total += p * (1.0 + walk(tree.children(child)))
        return total

    return 1.0 + walk([0])


def chain(probs: list[float]) -> TokenTree:
    tree = new_tree(prob=probs[0])
    for p in probs[1:]:
        tree.add_child(len(tree) - 1, token=0, prob=p)
    return tree


@st.composite
def surrogate_trees(draw: st.DrawFn, max_nodes: int = 10) -> TokenTree:
    tree = new_tree(prob=draw(st.floats(0.05, 1.0)))
    extra = draw(st.integers(0, max_nodes - 1))
    for i in range(extra):
        parent = draw(st.integers(0, i))
        used = sum(tree.nodes[c].surrogate_prob for c in tree.children(parent))
        room = 1.0 - used
        if room <= 0.01:
            continue
        prob = draw(st.floats(0.01, 0.95)) * room
        tree.add_child(parent, token=0, prob=prob)
    return tree


class TestModels:
    def test_surrogate_reads_stored_probs(self):
        tree = chain([0.9, 0.8])
        model = SurrogateAcceptance()
        assert model.node_prob(tree, 0) == 0.9
        assert model.node_prob(tree, 1) == 0.8

    def test_depth_decay_single_child_chain_is_one(self):
        tree = chain([1.0, 1.0, 1.0])
        model = DepthDecayAcceptance(p0=1.0, gamma=1.0)
        for i in range(len(tree)):
            assert model.node_prob(tree, i) == 1.0

    def test_depth_decay_decays_with_depth(self):
        tree = chain([1.0, 1.0, 1.0])
        model = DepthDecayAcceptance(p0=0.8, gamma=0.5)
        assert model.node_prob(tree, 0) == pytest.approx(0.8)
        assert model.node_prob(tree, 1) == pytest.approx(0.4)
        assert model.node_prob(tree, 2) == pytest.approx(0.2)

    def test_depth_decay_rank_shares(self):
        share = DepthDecayAcceptance.rank_share
        assert share(0, 1) == 1.0
        assert [share(r, 2) for r in range(2)] == [0.5, 0.5]
        assert [share(r, 3) for r in range(3)] == [0.5, 0.25, 0.25]
        assert [share(r, 4) for r in range(4)] == [0.5, 0.25, 0.125, 0.125]

    @given(st.integers(1, 8))
    def test_depth_decay_shares_sum_to_one(self, size: int):
        total = sum(DepthDecayAcceptance.rank_share(r, size) for r in range(size))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_depth_decay_sibling_split(self):
        tree = new_tree()
        tree.add_child(0, token=1, prob=0.5)
        tree.add_child(0, token=2, prob=0.5)
        model = DepthDecayAcceptance(p0=1.0, gamma=1.0)
        assert model.node_prob(tree, 1) == pytest.approx(0.5)
        assert model.node_prob(tree, 2) == pytest.approx(0.5)

    def test_depth_decay_shares_span_parents(self):
        # Rank shares divide a whole depth level, so children of different
        # parents compete for the same level mass.
        tree = new_tree()
        a = tree.add_child(0, token=1, prob=0.5)
        b = tree.add_child(0, token=2, prob=0.5)
        c1 = tree.add_child(a, token=3, prob=0.9)
        c2 = tree.add_child(a, token=4, prob=0.05)
        c3 = tree.add_child(b, token=5, prob=0.9)
        model = DepthDecayAcceptance(p0=0.8, gamma=0.5)
        level_mass = 0.8 * 0.5**2
        assert model.node_prob(tree, c1) == pytest.approx(level_mass * 0.5)
        assert model.node_prob(tree, c2) == pytest.approx(level_mass * 0.25)
        assert model.node_prob(tree, c3) == pytest.approx(level_mass * 0.25)

    def test_depth_decay_validation(self):
        with pytest.raises(ValueError):
            DepthDecayAcceptance(p0=1.5, gamma=0.5)
        with pytest.raises(ValueError):
            DepthDecayAcceptance(p0=0.5, gamma=-0.1)

    def test_explicit_lookup_and_missing_index(self):
        tree = chain([1.0, 1.0])
        model = ExplicitAcceptance({0: 0.7, 1: 0.2})
        assert model.node_prob(tree, 1) == 0.2
        tree.add_child(1, token=0, prob=0.5)
        with pytest.raises(ConfigError):
            model.node_prob(tree, 2)

    def test_model_round_trip(self):
        for model in (
            SurrogateAcceptance(),
            DepthDecayAcceptance(p0=0.9, gamma=0.7),
            ExplicitAcceptance({0: 0.5, 3: 0.25}),
        ):
            assert model_from_dict(model.to_dict()) == model

    def test_model_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            model_from_dict({"kind": "mystery"})


class TestExpectedLength:
    def test_root_only(self):
        tree = new_tree(prob=0.4)
        assert expected_accepted_length(SurrogateAcceptance(), tree) == pytest.approx(1.4)

    def test_two_node_chain(self):
        tree = chain([0.9, 0.8])
        value = expected_accepted_length(SurrogateAcceptance(), tree)
        assert value == pytest.approx(2.62, abs=1e-12)

    def test_path_products_chain(self):
        tree = chain([0.5, 0.4])
        probs = freeze_probs(SurrogateAcceptance(), tree)
        np.testing.assert_allclose(path_products(tree, probs), [0.5, 0.2])

    def test_path_accept_prob(self):
        tree = chain([0.5, 0.4])
        assert path_accept_prob(SurrogateAcceptance(), tree, 1) == pytest.approx(0.2)

    def test_branching_tree_against_oracle(self):
        tree = new_tree(prob=0.9)
        a = tree.add_child(0, token=1, prob=0.6)
        tree.add_child(0, token=2, prob=0.3)
        tree.add_child(a, token=3, prob=0.5)
        model = SurrogateAcceptance()
        probs = freeze_probs(model, tree)
        assert expected_accepted_length(model, tree) == pytest.approx(
            expected_len_by_enumeration(tree, probs), abs=1e-12
        )

    @given(surrogate_trees())
    def test_matches_enumeration_oracle(self, tree: TokenTree):
        model = SurrogateAcceptance()
        probs = freeze_probs(model, tree)
        assert expected_accepted_length(model, tree) == pytest.approx(
            expected_len_by_enumeration(tree, probs), abs=1e-12
        )

    @given(surrogate_trees())
    def test_bounds(self, tree: TokenTree):
        value = expected_accepted_length(SurrogateAcceptance(), tree)
        assert 1.0 - 1e-12 <= value <= len(tree) + 1 + 1e-12

    @given(surrogate_trees(), st.integers(0, 100), st.floats(0.05, 0.95))
    def test_adding_a_node_never_decreases(self, tree: TokenTree, parent_pick, frac):
        model = SurrogateAcceptance()
        before = expected_accepted_length(model, tree)
        parent = parent_pick % len(tree)
        used = sum(tree.nodes[c].surrogate_prob for c in tree.children(parent))
        room = 1.0 - used
        if room <= 0.01:
            return
        tree.add_child(parent, token=0, prob=frac * room)
        after = expected_accepted_length(model, tree)
        assert after >= before - 1e-12

    def test_sibling_overflow_rejected(self):
        tree = new_tree()
        tree.add_child(0, token=1, prob=0.6)
        tree.add_child(0, token=2, prob=0.4)
        model = ExplicitAcceptance({0: 1.0, 1: 0.7, 2: 0.7})
        with pytest.raises(ValueError):
            expected_accepted_length(model, tree)


class TestSampling:
    def test_walk_respects_tree_structure(self):
        tree = new_tree(prob=0.9)
        a = tree.add_child(0, token=1, prob=0.5)
        tree.add_child(0, token=2, prob=0.4)
        tree.add_child(a, token=3, prob=0.8)
        model = SurrogateAcceptance()
        rng = np.random.default_rng(0)
        for _ in range(200):
            out = sample_verification(model, tree, rng)
            assert out.accepted_len == len(out.accepted_path) + 1
            if out.accepted_path:
                assert out.accepted_path[0] == 0
            for u, v in zip(out.accepted_path, out.accepted_path[1:]):
                assert tree.parent(v) == u

    def test_certain_acceptance_takes_full_chain(self):
        tree = chain([1.0, 1.0, 1.0])
        model = SurrogateAcceptance()
        rng = np.random.default_rng(1)
        out = sample_verification(model, tree, rng)
        assert out.accepted_path == [0, 1, 2]
        assert out.accepted_len == 4

    def test_zero_acceptance_keeps_only_bonus(self):
        tree = chain([0.0, 0.0])
        out = sample_verification(SurrogateAcceptance(), tree, np.random.default_rng(2))
        assert out.accepted_path == []
        assert out.accepted_len == 1

    def test_siblings_mutually_exclusive(self):
        tree = new_tree(prob=1.0)
        tree.add_child(0, token=1, prob=0.5)
        tree.add_child(0, token=2, prob=0.5)
        rng = np.random.default_rng(3)
        probs = freeze_probs(SurrogateAcceptance(), tree)
        for _ in range(100):
            out = sample_with_probs(tree, probs, rng)
            assert not {1, 2} <= set(out.accepted_path)

    def test_mean_matches_expected_value(self):
        tree = new_tree(prob=0.9)
        a = tree.add_child(0, token=1, prob=0.6)
        tree.add_child(0, token=2, prob=0.3)
        tree.add_child(a, token=3, prob=0.5)
        model = SurrogateAcceptance()
        expected = expected_accepted_length(model, tree)
        rng = np.random.default_rng(4)
        n = 40_000
        lengths = np.array(
            [sample_verification(model, tree, rng).accepted_len for _ in range(n)]
        )
        sigma = lengths.std(ddof=1) / np.sqrt(n)
        assert abs(lengths.mean() - expected) <= 4 * sigma

    def test_batch_sampler_matches_expected_value(self):
        tree = new_tree(prob=0.8)
        a = tree.add_child(0, token=1, prob=0.55)
        b = tree.add_child(0, token=2, prob=0.35)
        tree.add_child(a, token=3, prob=0.6)
        tree.add_child(b, token=4, prob=0.9)
        model = SurrogateAcceptance()
        probs = freeze_probs(model, tree)
        expected = expected_accepted_length(model, tree)
        lengths = sample_accepted_lengths(tree, probs, 60_000, np.random.default_rng(5))
        assert lengths.min() >= 1
        assert lengths.max() <= len(tree) + 1
        sigma = lengths.std(ddof=1) / np.sqrt(lengths.size)
        assert abs(lengths.mean() - expected) <= 4 * sigma

    def test_batch_sampler_certain_chain(self):
        tree = chain([1.0, 1.0, 1.0])
        probs = freeze_probs(SurrogateAcceptance(), tree)
        lengths = sample_accepted_lengths(tree, probs, 16, np.random.default_rng(6))
        assert set(lengths.tolist()) == {4}
