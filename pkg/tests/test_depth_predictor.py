"""Tests for depth predictors and their training loop."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from specsim.depth_predictor import (
    FEATURE_NAMES,
    DepthSample,
    EmaHeuristic,
    FeatureState,
    FixedDepth,
    MlpPredictor,
    TrainConfig,
    decide_depth,
    predict_depth,
    train_predictor,
)
from specsim.errors import ConfigError


def make_samples(
    rng: np.random.Generator, count: int, noise: float = 0.1
) -> list[DepthSample]:
    """Synthetic profiling set whose features encode the realized length."""
    samples = []
    for _ in range(count):
        length = int(rng.integers(1, 17))
        features = length + rng.normal(0.0, noise, size=len(FEATURE_NAMES))
        samples.append(DepthSample(features=features, realized_len=length))
    return samples


class TestFixedDepth:
    def test_constant_regardless_of_features(self):
        predictor = FixedDepth(16)
        assert predictor.predict() == 16
        assert predictor.predict(np.zeros(5)) == 16
        assert predict_depth(predictor, np.arange(5.0)) == 16

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            FixedDepth(0)


class TestEmaHeuristic:
    def test_constant_history(self):
        predictor = EmaHeuristic(window=3, alpha=0.5, max_depth=16)
        for _ in range(3):
            predictor.observe(4)
        assert predictor.ready
        assert predictor.predict() == 4

    def test_not_ready_until_window_filled(self):
        predictor = EmaHeuristic(window=4, alpha=0.5, max_depth=16)
        predictor.observe(6)
        predictor.observe(6)
        assert not predictor.ready

    def test_empty_history_predicts_one(self):
        assert EmaHeuristic(window=3, alpha=0.5, max_depth=16).predict() == 1

    def test_clamped_to_max_depth(self):
        predictor = EmaHeuristic(window=2, alpha=1.0, max_depth=4)
        predictor.observe(9)
        predictor.observe(9)
        assert predictor.predict() == 4

    def test_matches_spelled_out_recurrence(self):
        predictor = EmaHeuristic(window=4, alpha=0.4, max_depth=16)
        history = [2, 7, 3, 5]
        for length in history:
            predictor.observe(length)
        ema = float(history[0])
        for length in history[1:]:
            ema = 0.4 * length + 0.6 * ema
        assert predictor.predict() == round(ema)

    @given(
        lengths=st.lists(st.integers(min_value=1, max_value=32), min_size=1, max_size=12),
        alpha=st.floats(min_value=0.05, max_value=1.0),
    )
    def test_prediction_bounded_by_history(self, lengths, alpha):
        predictor = EmaHeuristic(window=8, alpha=alpha, max_depth=64)
        for length in lengths:
            predictor.observe(length)
        window = lengths[-8:]
        assert min(window) - 1 <= predictor.predict() <= max(window) + 1

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            EmaHeuristic(window=0, alpha=0.5, max_depth=16)
        with pytest.raises(ValueError):
            EmaHeuristic(window=3, alpha=0.0, max_depth=16)
        with pytest.raises(ValueError):
            EmaHeuristic(window=3, alpha=0.5, max_depth=0)


class TestDecideDepth:
    def test_largest_confident_head(self):
        heads = {2: 0.9, 4: 0.8, 8: 0.4, 16: 0.1}
        assert decide_depth(heads, max_depth=16) == 4

    def test_no_confident_head_falls_back_to_one(self):
        assert decide_depth({2: 0.3, 4: 0.2}, max_depth=16) == 1

    def test_clamped_by_max_depth(self):
        assert decide_depth({2: 0.9, 8: 0.9}, max_depth=4) == 4

    @given(
        probs=st.dictionaries(
            st.integers(min_value=1, max_value=32),
            st.floats(min_value=0.0, max_value=1.0),
            min_size=1,
            max_size=6,
        )
    )
    def test_always_in_range_and_threshold_consistent(self, probs):
        depth = decide_depth(probs, max_depth=32)
        assert 1 <= depth <= 32
        confident = [d for d, p in probs.items() if p >= 0.5]
        if confident:
            assert depth == max(confident)
        else:
            assert depth == 1


class TestFeatureState:
    def test_defaults_before_any_observation(self):
        state = FeatureState()
        assert state.ema_len == 1.0
        assert state.last_len == 1.0

    def test_feature_vector_layout(self):
        state = FeatureState(history=8, alpha=0.4)
        state.observe(3)
        state.observe(5)
        candidates = [(1, 0.5), (2, 0.25), (3, 0.125), (4, 0.0625), (5, 0.0625)]
        vector = state.features(candidates)
        assert vector.shape == (len(FEATURE_NAMES),)
        ema = 0.4 * 5 + 0.6 * 3.0
        entropy = -sum(p * math.log(p) for _, p in candidates)
        assert vector[0] == pytest.approx(ema)
        assert vector[1] == pytest.approx(5.0)
        assert vector[2] == pytest.approx(0.5)
        assert vector[3] == pytest.approx(0.9375)
        assert vector[4] == pytest.approx(entropy)

    def test_empty_candidates(self):
        vector = FeatureState().features([])
        assert vector[2] == 0.0
        assert vector[3] == 0.0
        assert vector[4] == 0.0

    def test_rejects_bad_lengths(self):
        with pytest.raises(ValueError):
            FeatureState().observe(0)


def tiny_mlp(head_depths=(2, 4, 8, 16), max_depth=16) -> MlpPredictor:
    """Hand-set weights: zero hidden, biases drive the head outputs."""
    in_dim = len(FEATURE_NAMES)
    hidden = 3
    return MlpPredictor(
        w1=np.zeros((in_dim, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, len(head_depths))),
        b2=np.array([2.2, 1.4, -0.4, -2.2])[: len(head_depths)],
        head_depths=head_depths,
        max_depth=max_depth,
        feature_mean=np.zeros(in_dim),
        feature_std=np.ones(in_dim),
    )


class TestMlpPredictor:
    def test_head_outputs_from_biases(self):
        predictor = tiny_mlp()
        outputs = predictor.head_outputs(np.zeros(len(FEATURE_NAMES)))
        # Zeroed hidden weights leave sigmoid(0) = 0.5 activations, and zeroed
        # head weights leave sigmoid(bias).
        expect = 1.0 / (1.0 + np.exp(-np.array([2.2, 1.4, -0.4, -2.2])))
        for depth, value in zip((2, 4, 8, 16), expect):
            assert outputs[depth] == pytest.approx(value)

    def test_predict_applies_threshold_rule(self):
        predictor = tiny_mlp()
        # Heads sigmoid(2.2), sigmoid(1.4) clear 0.5; sigmoid(-0.4) does not.
        assert predictor.predict(np.zeros(len(FEATURE_NAMES))) == 4

    def test_requires_features(self):
        with pytest.raises(ValueError):
            tiny_mlp().predict(None)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            tiny_mlp().head_outputs(np.zeros(3))

    def test_checkpoint_round_trip(self):
        predictor = tiny_mlp()
        clone = MlpPredictor.from_dict(predictor.to_dict())
        features = np.arange(float(len(FEATURE_NAMES)))
        assert clone.head_outputs(features) == predictor.head_outputs(features)
        assert clone.head_depths == predictor.head_depths
        assert clone.feature_names == predictor.feature_names

    def test_invalid_checkpoint(self):
        with pytest.raises(ConfigError):
            MlpPredictor.from_dict({"kind": "mlp"})

    def test_duplicate_head_depths_rejected(self):
        with pytest.raises(ValueError):
            tiny_mlp(head_depths=(2, 2, 4, 8))


class TestTrainPredictor:
    def test_needs_two_distinct_samples(self):
        with pytest.raises(ValueError):
            train_predictor([])
        sample = DepthSample(features=np.zeros(5), realized_len=3)
        with pytest.raises(ValueError):
            train_predictor([sample])
        with pytest.raises(ValueError):
            train_predictor([sample, DepthSample(features=np.zeros(5), realized_len=3)])

    def test_degenerate_constant_length(self):
        rng = np.random.default_rng(11)
        samples = [
            DepthSample(features=rng.normal(size=5), realized_len=5) for _ in range(64)
        ]
        config = TrainConfig(head_depths=(2, 4, 8), max_depth=8, seed=1)
        result = train_predictor(samples, config)
        # Labels are constant per head: 1, 1, 0; the heads saturate to match.
        for _ in range(8):
            outputs = result.predictor.head_outputs(rng.normal(size=5))
            assert outputs[2] > 0.9
            assert outputs[4] > 0.9
            assert outputs[8] < 0.1

    def test_separable_features_generalize(self):
        rng = np.random.default_rng(12)
        train = make_samples(rng, 300)
        holdout = make_samples(rng, 100)
        result = train_predictor(train, TrainConfig(seed=3))
        correct = 0
        total = 0
        for sample in holdout:
            outputs = result.predictor.head_outputs(sample.features)
            for depth, prob in outputs.items():
                total += 1
                correct += (prob >= 0.5) == (sample.realized_len >= depth)
        assert correct / total >= 0.9

    def test_loss_descends(self):
        rng = np.random.default_rng(13)
        result = train_predictor(make_samples(rng, 200), TrainConfig(seed=5))
        assert result.final_loss <= result.initial_loss

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(14)
        samples = make_samples(rng, 100)
        first = train_predictor(samples, TrainConfig(seed=9))
        second = train_predictor(samples, TrainConfig(seed=9))
        assert np.array_equal(first.predictor.w1, second.predictor.w1)
        assert np.array_equal(first.predictor.w2, second.predictor.w2)
        assert first.final_loss == second.final_loss

    def test_rejects_nonpositive_length(self):
        with pytest.raises(ValueError):
            DepthSample(features=np.zeros(5), realized_len=0)
