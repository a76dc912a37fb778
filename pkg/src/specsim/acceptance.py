"""Stochastic models of verifier agreement with a draft tree.

Verification accepts at most one path through the tree.  Walking from the
confirmed token, at each accepted node the verifier picks at most one child:
child ``c`` with its conditional probability, or it stops with the residual
mass.  Sibling acceptances are therefore mutually exclusive, which is why
per-parent child probabilities must sum to at most one.

The accepted length always includes one extra token: when the walk stops,
the verifier still emits a fresh token of its own at the stop position.

Three model families supply the per-node conditional probabilities:

* ``SurrogateAcceptance`` trusts the drafter probability stored on each node.
* ``DepthDecayAcceptance`` is synthetic: probability decays geometrically
  with depth and is split among siblings by rank.
* ``ExplicitAcceptance`` reads a per-node-index table.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .token_tree import SIBLING_SUM_TOL, TokenTree


class AcceptanceModel(abc.ABC):
    """Assigns each node its conditional acceptance probability."""

    @abc.abstractmethod
    def node_prob(self, tree: TokenTree, index: int) -> float:
        """P(node ``index`` accepted | its parent accepted)."""

    @abc.abstractmethod
    def to_dict(self) -> dict:
        """JSON-serializable description of the model."""


class SurrogateAcceptance(AcceptanceModel):
    """Accept with the drafter probability recorded on the node."""

    def node_prob(self, tree: TokenTree, index: int) -> float:
        return tree.nodes[index].surrogate_prob

    def to_dict(self) -> dict:
        return {"variant": "surrogate"}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SurrogateAcceptance)

    def __repr__(self) -> str:
        return "SurrogateAcceptance()"


class DepthDecayAcceptance(AcceptanceModel):
    """Synthetic model: ``p0 * gamma**depth`` split across a level by rank.

    Each depth level carries total mass ``p0 * gamma**depth``, divided among
    the level's nodes by a geometric rank split where the last rank keeps the
    tail: a lone node takes the full share, two nodes take 1/2 each, three
    take 1/2, 1/4, 1/4, and so on. Ranks follow insertion order, so earlier
    attachments at a depth receive the larger shares. A group of siblings can
    never sum above its level's mass, which keeps per-parent sums within one.
    """

    def __init__(self, p0: float, gamma: float) -> None:
        if not 0.0 <= p0 <= 1.0:
            raise ValueError(f"p0 {p0!r} outside [0, 1]")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma {gamma!r} outside [0, 1]")
        self.p0 = float(p0)
        self.gamma = float(gamma)

    @staticmethod
    def rank_share(rank: int, group_size: int) -> float:
        if group_size < 1 or not 0 <= rank < group_size:
            raise ValueError(f"invalid rank {rank} in group of {group_size}")
        if rank < group_size - 1:
            return 2.0 ** -(rank + 1)
        return 2.0 ** -(group_size - 1)

    def node_prob(self, tree: TokenTree, index: int) -> float:
        node = tree.nodes[index]
        rank, size = tree.level_rank(index)
        return self.p0 * self.gamma ** node.depth * self.rank_share(rank, size)

    def to_dict(self) -> dict:
        return {"variant": "depth_decay", "p0": self.p0, "gamma": self.gamma}

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, DepthDecayAcceptance)
            and self.p0 == other.p0
            and self.gamma == other.gamma
        )

    def __repr__(self) -> str:
        return f"DepthDecayAcceptance(p0={self.p0}, gamma={self.gamma})"


class ExplicitAcceptance(AcceptanceModel):
    """Per-node probabilities from an explicit index table."""

    def __init__(self, probs: Mapping[int, float]) -> None:
        self.probs = {int(k): float(v) for k, v in probs.items()}
        for index, prob in self.probs.items():
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"probability {prob!r} for node {index} outside [0, 1]")

    def node_prob(self, tree: TokenTree, index: int) -> float:
        try:
            return self.probs[index]
        except KeyError:
            raise ConfigError(f"explicit acceptance model has no probability for node {index}") from None

    def to_dict(self) -> dict:
        return {"variant": "explicit", "probs": {str(k): v for k, v in self.probs.items()}}

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ExplicitAcceptance) and self.probs == other.probs

    def __repr__(self) -> str:
        return f"ExplicitAcceptance({self.probs!r})"


def model_from_dict(data: dict) -> AcceptanceModel:
    """Build an acceptance model from its JSON form."""
    if not isinstance(data, dict) or "variant" not in data:
        raise ConfigError("acceptance model must be an object with a 'variant' field")
    variant = data["variant"]
    try:
        if variant == "surrogate":
            return SurrogateAcceptance()
        if variant == "depth_decay":
            return DepthDecayAcceptance(data["p0"], data["gamma"])
        if variant == "explicit":
            return ExplicitAcceptance({int(k): v for k, v in data["probs"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid acceptance model config: {exc}") from exc
    raise ConfigError(f"unknown acceptance model variant {variant!r}")


def freeze_probs(model: AcceptanceModel, tree: TokenTree) -> np.ndarray:
    """Materialize every node's conditional probability as an array.

    Downstream pruning restricts this array rather than re-deriving
    probabilities on the pruned tree: the verifier's agreement with a drafted
    token does not depend on which of its siblings were submitted, so
    dropping nodes only grows the residual stopping mass.
    """
    probs = np.empty(len(tree), dtype=np.float64)
    for index in range(len(tree)):
        prob = model.node_prob(tree, index)
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"model probability {prob!r} for node {index} outside [0, 1]")
        probs[index] = prob
    return probs


def _check_sibling_sums(tree: TokenTree, probs: np.ndarray) -> None:
    for parent in range(len(tree)):
        group = tree.children(parent)
        if group:
            total = float(np.sum(probs[group]))
            if total > 1.0 + SIBLING_SUM_TOL:
                raise ValueError(
                    f"model probabilities of children of node {parent} sum to {total:.12f} > 1"
                )


def path_products(tree: TokenTree, probs: np.ndarray) -> np.ndarray:
    """Probability that the accepted path reaches each node."""
    out = np.empty(len(tree), dtype=np.float64)
    out[0] = probs[0]
    for index in range(1, len(tree)):
        parent = tree.nodes[index].parent
        assert parent is not None
        out[index] = out[parent] * probs[index]
    return out


def path_accept_prob(model: AcceptanceModel, tree: TokenTree, index: int) -> float:
    """Probability that the entire root-to-``index`` path is accepted."""
    prob = 1.0
    for node in tree.path_to_root(index):
        prob *= model.node_prob(tree, node)
    return prob


def expected_accepted_length(model: AcceptanceModel, tree: TokenTree) -> float:
    """Expected accepted tokens per verification, bonus token included.

    Equals ``1 + sum_i path_accept_prob(i)``: the walk length telescopes
    into the per-node path probabilities.
    """
    probs = freeze_probs(model, tree)
    _check_sibling_sums(tree, probs)
    if probs[0] > 1.0 + SIBLING_SUM_TOL:
        raise ValueError(f"root probability {probs[0]} > 1")
    return 1.0 + float(np.sum(path_products(tree, probs)))


@dataclass
class VerificationOutcome:
    """Realized verification result.

    ``accepted_path`` lists accepted node indices from the root downward and
    may be empty.  ``accepted_len`` is ``len(accepted_path) + 1`` for the
    bonus token.
    """

    accepted_path: list[int]
    accepted_len: int


def sample_with_probs(tree: TokenTree, probs: np.ndarray, rng: np.random.Generator) -> VerificationOutcome:
    """Sample one verification walk given frozen per-node probabilities."""
    path: list[int] = []
    cursor: int | None = None
    while True:
        group = [0] if cursor is None else tree.children(cursor)
        if not group:
            break
        draw = rng.random()
        cumulative = 0.0
        chosen = None
        for child in group:
            cumulative += probs[child]
            if draw < cumulative:
                chosen = child
                break
        if chosen is None:
            break
        path.append(chosen)
        cursor = chosen
    return VerificationOutcome(path, len(path) + 1)


def sample_verification(model: AcceptanceModel, tree: TokenTree, rng: np.random.Generator) -> VerificationOutcome:
    """Sample one verification outcome under ``model``."""
    probs = freeze_probs(model, tree)
    _check_sibling_sums(tree, probs)
    return sample_with_probs(tree, probs, rng)


def sample_accepted_lengths(
    tree: TokenTree, probs: np.ndarray, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Vectorized accepted lengths of ``count`` independent verifications.

    Statistically identical to repeated :func:`sample_with_probs`; the draws
    are organized level by level so large Monte Carlo runs stay cheap.
    """
    _check_sibling_sums(tree, probs)
    size = len(tree)
    kid_lists = [tree.children(i) for i in range(size)]
    counts = np.array([len(k) for k in kid_lists], dtype=np.int64)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    flat = np.array([c for kids in kid_lists for c in kids], dtype=np.int64)
    flat_probs = probs[flat] if flat.size else np.empty(0)

    lengths = np.ones(count, dtype=np.int64)
    draws = rng.random(count)
    alive = draws < probs[0]
    current = np.zeros(count, dtype=np.int64)
    lengths[alive] += 1
    while True:
        active = np.nonzero(alive)[0]
        if active.size == 0:
            break
        nodes = current[active]
        base = ptr[nodes]
        branch = counts[nodes]
        max_branch = int(branch.max())
        if max_branch == 0:
            break
        draws = rng.random(active.size)
        accumulated = np.zeros(active.size)
        selected = np.full(active.size, -1, dtype=np.int64)
        for rank in range(max_branch):
            has = branch > rank
            rank_probs = np.zeros(active.size)
            rank_probs[has] = flat_probs[base[has] + rank]
            newly = (selected < 0) & has & (draws < accumulated + rank_probs)
            selected[newly] = flat[base[newly] + rank]
            accumulated += rank_probs
        took = selected >= 0
        alive[active[~took]] = False
        moved = active[took]
        current[moved] = selected[took]
        lengths[moved] += 1
    return lengths
