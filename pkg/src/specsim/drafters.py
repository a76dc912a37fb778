"""Synthetic drafter distributions and per-iteration drafter schedules.

A drafter stands in for the small speculation model: asked to extend a tree
node, it returns ranked ``(token, probability)`` candidates whose
probabilities act as acceptance surrogates.  Difficulty is a property of the
text being decoded, so the generator side hands out a possibly different
drafter per iteration; deterministic block schedules emulate topic shifts
without consuming random state.
"""

from __future__ import annotations

from dataclasses import dataclass

from specsim.errors import ConfigError
from specsim.token_tree import TokenTree


@dataclass(frozen=True)
class GeometricDrafter:
    """Depth-decaying candidates with a geometric rank profile.

    The candidate at depth ``d`` and rank ``r`` carries probability
    ``top_mass * decay**d * top_share * (1 - top_share)**r``, so deeper and
    lower-ranked continuations are less likely to survive verification.
    Per-parent sums stay below ``top_mass * decay**d <= 1``.
    """

    top_mass: float
    decay: float
    fanout: int = 8
    top_share: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.top_mass <= 1.0:
            raise ValueError(f"top_mass {self.top_mass} must be in (0, 1]")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay {self.decay} must be in (0, 1]")
        if self.fanout < 1:
            raise ValueError(f"fanout {self.fanout} must be >= 1")
        if not 0.0 < self.top_share < 1.0:
            raise ValueError(f"top_share {self.top_share} must be in (0, 1)")

    def root(self) -> tuple[int, float]:
        return (1, self.top_mass)

    def candidates(self, tree: TokenTree, node: int, k: int) -> list[tuple[int, float]]:
        depth = tree.depth(node) + 1
        mass = self.top_mass * self.decay**depth
        count = min(k, self.fanout)
        return [
            (rank + 1, mass * self.top_share * (1.0 - self.top_share) ** rank)
            for rank in range(count)
        ]

    def signature(self) -> tuple:
        return ("geometric", self.top_mass, self.decay, self.fanout, self.top_share)

    def chain_expected_length(self, num_nodes: int) -> float:
        """Closed-form expected accepted length of the top-candidate chain."""
        if num_nodes < 1:
            raise ValueError(f"num_nodes {num_nodes} must be >= 1")
        total = 1.0
        path = 1.0
        for depth in range(num_nodes):
            prob = self.top_mass if depth == 0 else self.top_mass * self.decay**depth * self.top_share
            path *= prob
            total += path
        return total


@dataclass(frozen=True)
class FlatDrafter:
    """Equal-probability candidates for rank-indifferent acceptance models."""

    mass: float = 1.0
    fanout: int = 8

    def __post_init__(self) -> None:
        if not 0.0 < self.mass <= 1.0:
            raise ValueError(f"mass {self.mass} must be in (0, 1]")
        if self.fanout < 1:
            raise ValueError(f"fanout {self.fanout} must be >= 1")

    def root(self) -> tuple[int, float]:
        return (1, 1.0)

    def candidates(self, tree: TokenTree, node: int, k: int) -> list[tuple[int, float]]:
        count = min(k, self.fanout)
        return [(rank + 1, self.mass / self.fanout) for rank in range(count)]

    def signature(self) -> tuple:
        return ("flat", self.mass, self.fanout)


class StationaryGenerator:
    """The same drafter on every iteration."""

    def __init__(self, drafter) -> None:
        self.drafter = drafter

    def drafter_at(self, iteration: int):
        return self.drafter

    def regimes(self) -> list:
        return [self.drafter]


class BlockGenerator:
    """Cycles through difficulty regimes in fixed-length blocks."""

    def __init__(self, regimes: list, block_len: int) -> None:
        if not regimes:
            raise ValueError("need at least one regime")
        if block_len < 1:
            raise ValueError(f"block_len {block_len} must be >= 1")
        self._regimes = list(regimes)
        self.block_len = block_len

    def drafter_at(self, iteration: int):
        return self._regimes[(iteration // self.block_len) % len(self._regimes)]

    def regimes(self) -> list:
        return list(self._regimes)


def drafter_from_dict(data: dict):
    """One drafter from its config mapping."""
    try:
        variant = data["variant"]
        if variant == "geometric":
            return GeometricDrafter(
                top_mass=float(data["top_mass"]),
                decay=float(data["decay"]),
                fanout=int(data.get("fanout", 8)),
                top_share=float(data.get("top_share", 0.7)),
            )
        if variant == "flat":
            return FlatDrafter(
                mass=float(data.get("mass", 1.0)), fanout=int(data.get("fanout", 8))
            )
        raise ValueError(f"unknown drafter variant {variant!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid drafter config: {exc}") from exc


def generator_from_dict(data: dict):
    """A per-iteration drafter schedule from its config mapping."""
    try:
        variant = data.get("variant", "stationary")
        if variant == "stationary":
            return StationaryGenerator(drafter_from_dict(data["drafter"]))
        if variant == "blocks":
            regimes = [drafter_from_dict(entry) for entry in data["regimes"]]
            return BlockGenerator(regimes, block_len=int(data["block_len"]))
        raise ValueError(f"unknown generator variant {variant!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid drafter schedule config: {exc}") from exc
