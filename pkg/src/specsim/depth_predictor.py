"""Draft-depth predictors and their training loop.

Before each decoding iteration the drafter must commit to a tree depth.  The
predictors here map cheap runtime observations to that depth: a constant
baseline, an exponential-moving-average heuristic, and a small two-layer
perceptron with one sigmoid head per candidate depth, where head ``d``
estimates the probability that the accepted length reaches ``d``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from specsim.errors import ConfigError

FEATURE_NAMES: tuple[str, ...] = (
    "ema_len",
    "last_len",
    "root_top1_mass",
    "root_top4_mass",
    "root_entropy",
)

DEFAULT_HEAD_DEPTHS: tuple[int, ...] = (2, 4, 6, 8, 12, 16)


class FeatureState:
    """Rolling observations turned into predictor features.

    Tracks the recent accepted lengths and summarizes the drafter's current
    root-candidate distribution.  The feature layout is ``FEATURE_NAMES``.
    """

    def __init__(self, history: int = 8, alpha: float = 0.4) -> None:
        if history < 1:
            raise ValueError(f"history {history} must be >= 1")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha {alpha} must be in (0, 1]")
        self.alpha = alpha
        self._lengths: deque[int] = deque(maxlen=history)

    def observe(self, realized_len: int) -> None:
        if realized_len < 1:
            raise ValueError(f"realized length {realized_len} must be >= 1")
        self._lengths.append(realized_len)

    @property
    def ema_len(self) -> float:
        if not self._lengths:
            return 1.0
        values = iter(self._lengths)
        ema = float(next(values))
        for value in values:
            ema = self.alpha * float(value) + (1.0 - self.alpha) * ema
        return ema

    @property
    def last_len(self) -> float:
        return float(self._lengths[-1]) if self._lengths else 1.0

    def features(self, root_candidates: Sequence[tuple[int, float]]) -> np.ndarray:
        probs = np.array([p for _, p in root_candidates], dtype=np.float64)
        top1 = float(probs[0]) if probs.size else 0.0
        top4 = float(probs[:4].sum()) if probs.size else 0.0
        positive = probs[probs > 0.0]
        entropy = float(-(positive * np.log(positive)).sum()) if positive.size else 0.0
        return np.array([self.ema_len, self.last_len, top1, top4, entropy])


class DepthPredictor(ABC):
    """Common contract: observe realized lengths, predict the next depth."""

    @abstractmethod
    def predict(self, features: np.ndarray | None) -> int:
        """Depth for the next iteration, always >= 1."""

    def observe(self, realized_len: int) -> None:  # noqa: B027 - optional hook
        """Feed back the accepted length realized with the last prediction."""

    @property
    def ready(self) -> bool:
        """Whether predict() is informed by enough history to be used."""
        return True


class FixedDepth(DepthPredictor):
    """Always the same depth; the static baseline."""

    def __init__(self, depth: int) -> None:
        if depth < 1:
            raise ValueError(f"depth {depth} must be >= 1")
        self.depth = depth

    def predict(self, features: np.ndarray | None = None) -> int:
        return self.depth

    def __repr__(self) -> str:
        return f"FixedDepth({self.depth})"


class EmaHeuristic(DepthPredictor):
    """Round the exponential moving average of recent accepted lengths."""

    def __init__(self, window: int, alpha: float, max_depth: int) -> None:
        if window < 1:
            raise ValueError(f"window {window} must be >= 1")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha {alpha} must be in (0, 1]")
        if max_depth < 1:
            raise ValueError(f"max_depth {max_depth} must be >= 1")
        self.window = window
        self.alpha = alpha
        self.max_depth = max_depth
        self._lengths: deque[int] = deque(maxlen=window)

    def observe(self, realized_len: int) -> None:
        if realized_len < 1:
            raise ValueError(f"realized length {realized_len} must be >= 1")
        self._lengths.append(realized_len)

    @property
    def ready(self) -> bool:
        return len(self._lengths) >= self.window

    def predict(self, features: np.ndarray | None = None) -> int:
        if not self._lengths:
            return 1
        values = iter(self._lengths)
        ema = float(next(values))
        for value in values:
            ema = self.alpha * float(value) + (1.0 - self.alpha) * ema
        return max(1, min(self.max_depth, round(ema)))


def decide_depth(head_probs: Mapping[int, float], max_depth: int) -> int:
    """Largest head depth whose estimate reaches 0.5; 1 when none does."""
    chosen = 1
    for depth in sorted(head_probs):
        if head_probs[depth] >= 0.5:
            chosen = max(chosen, depth)
    return max(1, min(max_depth, chosen))


class MlpPredictor(DepthPredictor):
    """Two-layer perceptron with one cumulative head per candidate depth.

    Head ``d`` emits P(accepted length >= d); the prediction is the largest
    depth whose head clears 0.5.  Inputs are standardized with the training
    statistics stored on the predictor.
    """

    def __init__(
        self,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: np.ndarray,
        head_depths: Sequence[int],
        max_depth: int,
        feature_mean: np.ndarray,
        feature_std: np.ndarray,
        feature_names: Sequence[str] = FEATURE_NAMES,
    ) -> None:
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.head_depths = tuple(int(d) for d in head_depths)
        self.max_depth = max_depth
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.feature_names = tuple(feature_names)
        if sorted(set(self.head_depths)) != sorted(self.head_depths):
            raise ValueError("head depths must be distinct")
        if min(self.head_depths) < 1:
            raise ValueError("head depths must be >= 1")
        if max_depth < 1:
            raise ValueError(f"max_depth {max_depth} must be >= 1")

    def head_outputs(self, features: np.ndarray) -> dict[int, float]:
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.w1.shape[0],):
            raise ValueError(
                f"expected {self.w1.shape[0]} features, got shape {features.shape}"
            )
        x = (features - self.feature_mean) / self.feature_std
        hidden = _sigmoid(x @ self.w1 + self.b1)
        outputs = _sigmoid(hidden @ self.w2 + self.b2)
        return {d: float(p) for d, p in zip(self.head_depths, outputs)}

    def predict(self, features: np.ndarray | None) -> int:
        if features is None:
            raise ValueError("the perceptron predictor requires a feature vector")
        return decide_depth(self.head_outputs(features), self.max_depth)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "head_depths": list(self.head_depths),
            "max_depth": self.max_depth,
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MlpPredictor":
        try:
            if data["kind"] != "mlp":
                raise ValueError(f"unknown predictor kind {data['kind']!r}")
            return cls(
                w1=np.array(data["w1"], dtype=np.float64),
                b1=np.array(data["b1"], dtype=np.float64),
                w2=np.array(data["w2"], dtype=np.float64),
                b2=np.array(data["b2"], dtype=np.float64),
                head_depths=data["head_depths"],
                max_depth=int(data["max_depth"]),
                feature_mean=np.array(data["feature_mean"], dtype=np.float64),
                feature_std=np.array(data["feature_std"], dtype=np.float64),
                feature_names=data.get("feature_names", FEATURE_NAMES),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid predictor checkpoint: {exc}") from exc


@dataclass(frozen=True)
class DepthSample:
    """One profiling observation: features seen, accepted length realized."""

    features: np.ndarray
    realized_len: int

    def __post_init__(self) -> None:
        if self.realized_len < 1:
            raise ValueError(f"realized length {self.realized_len} must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 16
    head_depths: tuple[int, ...] = DEFAULT_HEAD_DEPTHS
    max_depth: int = 16
    learning_rate: float = 0.3
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class TrainResult:
    predictor: MlpPredictor
    initial_loss: float
    final_loss: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce(pred: np.ndarray, label: np.ndarray) -> float:
    p = np.clip(pred, 1e-12, 1.0 - 1e-12)
    return float(-(label * np.log(p) + (1.0 - label) * np.log(1.0 - p)).mean())


def train_predictor(
    samples: Sequence[DepthSample], config: TrainConfig = TrainConfig()
) -> TrainResult:
    """Fit the perceptron heads by mini-batch gradient descent.

    Head ``d`` is trained on the binary label 1{realized_len >= d}; the loss
    is the mean binary cross-entropy across heads.  Fully deterministic for a
    given dataset and config.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples to fit the predictor")
    x = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    if len({(tuple(row), s.realized_len) for row, s in zip(x.tolist(), samples)}) < 2:
        raise ValueError("need at least 2 distinct samples to fit the predictor")
    lengths = np.array([s.realized_len for s in samples], dtype=np.float64)
    depths = np.array(config.head_depths, dtype=np.float64)
    labels = (lengths[:, None] >= depths[None, :]).astype(np.float64)

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    xs = (x - mean) / std

    rng = np.random.default_rng(config.seed)
    in_dim, hidden, heads = x.shape[1], config.hidden, len(config.head_depths)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, heads))
    b2 = np.zeros(heads)

    def forward(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = _sigmoid(batch @ w1 + b1)
        return h, _sigmoid(h @ w2 + b2)

    initial_loss = _bce(forward(xs)[1], labels)
    n = xs.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = xs[idx], labels[idx]
            h, p = forward(xb)
            # Mean BCE over batch and heads; sigmoid + BCE gives (p - y).
            d_out = (p - yb) / (xb.shape[0] * heads)
            grad_w2 = h.T @ d_out
            grad_b2 = d_out.sum(axis=0)
            d_hidden = (d_out @ w2.T) * h * (1.0 - h)
            grad_w1 = xb.T @ d_hidden
            grad_b1 = d_hidden.sum(axis=0)
            w2 -= config.learning_rate * grad_w2
            b2 -= config.learning_rate * grad_b2
            w1 -= config.learning_rate * grad_w1
            b1 -= config.learning_rate * grad_b1

    final_loss = _bce(forward(xs)[1], labels)
    predictor = MlpPredictor(
        w1=w1,
        b1=b1,
        w2=w2,
        b2=b2,
        head_depths=config.head_depths,
        max_depth=config.max_depth,
        feature_mean=mean,
        feature_std=std,
    )
    return TrainResult(predictor=predictor, initial_loss=initial_loss, final_loss=final_loss)


def predict_depth(predictor: DepthPredictor, features: np.ndarray | None = None) -> int:
    """Depth the predictor commits to for the next iteration."""
    return predictor.predict(features)
