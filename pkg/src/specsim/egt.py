"""Equal-growth tree drafting and verification-width pruning.

Growth attaches a constant number of leaves per drafter invocation, chosen
globally across the frontier by path-weighted probability, so every level
has the same width and the draft graph shape is known ahead of time.  After
growth, a tree-knapsack dynamic program picks the connected root subtree
whose size maximizes the latency-aware speedup objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from specsim.acceptance import (
    AcceptanceModel,
    DepthDecayAcceptance,
    SurrogateAcceptance,
    freeze_probs,
    path_products,
)
from specsim.latency import ProfilePair, SpeedupInputs, TreeShape, tree_speedup
from specsim.token_tree import SIBLING_SUM_TOL, TokenTree, new_tree


@dataclass(frozen=True)
class EgtConfig:
    """Search space for the drafting shape."""

    candidate_widths: tuple[int, ...] = (1, 2, 4, 8)
    max_depth: int = 16
    max_verify: int = 64
    expansion_k: int = 8

    def __post_init__(self) -> None:
        if not self.candidate_widths:
            raise ValueError("candidate_widths must be non-empty")
        if any(w < 1 for w in self.candidate_widths):
            raise ValueError(f"candidate widths must be >= 1: {self.candidate_widths}")
        if list(self.candidate_widths) != sorted(set(self.candidate_widths)):
            raise ValueError(f"candidate widths must be sorted and distinct: {self.candidate_widths}")
        if self.max_depth < 1:
            raise ValueError(f"max_depth {self.max_depth} must be >= 1")
        if self.max_verify < 1:
            raise ValueError(f"max_verify {self.max_verify} must be >= 1")
        if self.expansion_k < 1:
            raise ValueError(f"expansion_k {self.expansion_k} must be >= 1")


@runtime_checkable
class DrafterDistribution(Protocol):
    """Token-probability source standing in for a drafter model."""

    def root(self) -> tuple[int, float]:
        """The first speculative token and its surrogate probability."""
        ...

    def candidates(self, tree: TokenTree, node: int, k: int) -> Sequence[tuple[int, float]]:
        """Up to ``k`` child candidates for ``node``, probabilities descending."""
        ...


def _checked_candidates(
    drafter: DrafterDistribution, tree: TokenTree, node: int, k: int
) -> list[tuple[int, float]]:
    out = list(drafter.candidates(tree, node, k))
    total = 0.0
    previous = float("inf")
    for token, prob in out:
        if not 0.0 <= prob <= 1.0:
            raise ValueError(f"candidate probability {prob} for node {node} out of range")
        if prob > previous:
            raise ValueError(f"candidate probabilities for node {node} must be descending")
        previous = prob
        total += prob
    if total > 1.0 + SIBLING_SUM_TOL:
        raise ValueError(f"candidate probabilities for node {node} sum to {total}")
    return out


def grow_step(
    tree: TokenTree, drafter: DrafterDistribution, w_draft: int, expansion_k: int = 8
) -> list[int]:
    """Attach up to ``w_draft`` leaves under the newest level.

    Candidates from every frontier node compete globally on
    path probability times candidate probability; score ties go to the lower
    parent index and then the better candidate rank.  Returns the indices of
    the attached nodes, fewer than ``w_draft`` when the drafter runs short.
    """
    if w_draft < 1:
        raise ValueError(f"w_draft {w_draft} must be >= 1")
    frontier = tree.levels[-1]
    if not frontier:
        raise ValueError("frontier is empty")

    surrogate = [node.surrogate_prob for node in tree.nodes]
    scored: list[tuple[float, int, int, int, float]] = []
    for parent in frontier:
        path_prob = 1.0
        for step in tree.path_to_root(parent):
            path_prob *= surrogate[step]
        for rank, (token, prob) in enumerate(
            _checked_candidates(drafter, tree, parent, expansion_k)
        ):
            scored.append((path_prob * prob, parent, rank, token, prob))

    scored.sort(key=lambda item: (-item[0], item[1], item[2]))
    added = []
    for _, parent, _, token, prob in scored[:w_draft]:
        added.append(tree.add_child(parent, token, prob))
    return added


@dataclass(frozen=True)
class GrowthResult:
    tree: TokenTree
    shortfall: bool


def grow_egt(
    tree: TokenTree,
    drafter: DrafterDistribution,
    d_draft: int,
    w_draft: int,
    expansion_k: int = 8,
) -> GrowthResult:
    """Run ``d_draft`` equal-width growth steps on ``tree`` (mutating it).

    Absent candidate shortfall the result has ``1 + d_draft * w_draft`` nodes
    and every level beyond the root holds exactly ``w_draft`` of them.
    """
    if d_draft < 1:
        raise ValueError(f"d_draft {d_draft} must be >= 1")
    shortfall = False
    for _ in range(d_draft):
        if not tree.levels[-1]:
            shortfall = True
            break
        added = grow_step(tree, drafter, w_draft, expansion_k)
        if len(added) < w_draft:
            shortfall = True
        if not added:
            break
    return GrowthResult(tree=tree, shortfall=shortfall)


class SubtreeKnapsack:
    """Best connected root subtree of every size, by bottom-up merging.

    ``best(v, k)`` is the maximum total gain of a connected subtree rooted at
    ``v`` with exactly ``k`` nodes; children fold in one at a time with the
    standard knapsack combination, which keeps the work at O(N * K^2).  Each
    merge records the winning allocation so any optimum is reconstructed
    exactly, without floating-point matching.
    """

    def __init__(self, tree: TokenTree, gains: np.ndarray, max_size: int) -> None:
        if max_size < 1:
            raise ValueError(f"max_size {max_size} must be >= 1")
        if len(gains) != len(tree):
            raise ValueError(f"need one gain per node, got {len(gains)} for {len(tree)}")
        self.tree = tree
        self.gains = np.asarray(gains, dtype=np.float64)
        self.max_size = min(max_size, len(tree))
        self._sizes = _subtree_sizes(tree)
        self._best: list[np.ndarray] = [np.empty(0)] * len(tree)
        # Per node, in merge order: (child, nodes allocated to that child's
        # subtree for each total size).
        self._steps: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(len(tree))]
        self._solve()

    def _solve(self) -> None:
        cap = self.max_size
        for v in reversed(range(len(self.tree))):
            row = np.full(cap + 1, -np.inf)
            row[1] = self.gains[v]
            for child in self.tree.children(v):
                child_row = self._best[child]
                merged = row.copy()
                allocation = np.zeros(cap + 1, dtype=np.int64)
                for k in range(1, cap + 1):
                    if row[k] == -np.inf:
                        continue
                    # j nodes taken from the child's subtree; j = 0 keeps it out.
                    top = min(cap - k, min(self._sizes[child], cap))
                    for j in range(1, top + 1):
                        value = row[k] + child_row[j]
                        if value > merged[k + j]:
                            merged[k + j] = value
                            allocation[k + j] = j
                row = merged
                self._steps[v].append((child, allocation))
            self._best[v] = row

    def best(self, v: int, k: int) -> float:
        if not 1 <= k <= self.max_size:
            raise ValueError(f"size {k} out of range [1, {self.max_size}]")
        return float(self._best[v][k])

    def best_row(self, v: int) -> np.ndarray:
        return self._best[v].copy()

    def pick(self, k: int) -> set[int]:
        """One optimal node set of size ``k`` for the whole-tree root."""
        if not 1 <= k <= self.max_size or self._best[0][k] == -np.inf:
            raise ValueError(f"no connected root subtree of size {k}")
        keep: set[int] = set()
        self._collect(0, k, keep)
        return keep

    def _collect(self, v: int, k: int, keep: set[int]) -> None:
        keep.add(v)
        remaining = k
        # Undo the merges in reverse, peeling off each child's allocation.
        for child, allocation in reversed(self._steps[v]):
            taken = int(allocation[remaining])
            if taken:
                self._collect(child, taken, keep)
                remaining -= taken


def _subtree_sizes(tree: TokenTree) -> list[int]:
    sizes = [1] * len(tree)
    for v in reversed(range(1, len(tree))):
        sizes[tree.parent(v)] += sizes[v]
    return sizes


@dataclass(frozen=True)
class PruneResult:
    tree: TokenTree
    w_verify: int
    kept: tuple[int, ...]
    expected_aal: float
    speedup: float


def prune_verify(
    tree: TokenTree,
    model: AcceptanceModel,
    profiles: ProfilePair,
    d_draft: int,
    w_draft: int,
    max_verify: int,
) -> PruneResult:
    """Choose the verification budget and drop everything outside it.

    Evaluates the latency-aware speedup at every size ``k <= max_verify``
    using the optimal expected accepted length ``1 + best(root, k)`` and
    keeps the maximizing connected root subtree.  Ties go to the smaller
    budget.
    """
    probs = freeze_probs(model, tree)
    gains = path_products(tree, probs)
    dp = SubtreeKnapsack(tree, gains, max_verify)
    best_k = 0
    best_speedup = -np.inf
    for k in range(1, dp.max_size + 1):
        value = dp.best(0, k)
        if value == -np.inf:
            continue
        speedup = tree_speedup(
            SpeedupInputs(
                aal=1.0 + value,
                shape=TreeShape(w_draft=w_draft, d_draft=d_draft, w_verify=k),
                profiles=profiles,
            )
        )
        if speedup > best_speedup + 1e-12:
            best_k, best_speedup = k, speedup
    keep = dp.pick(best_k)
    pruned, _ = tree.subtree(keep)
    return PruneResult(
        tree=pruned,
        w_verify=best_k,
        kept=tuple(sorted(keep)),
        expected_aal=1.0 + dp.best(0, best_k),
        speedup=best_speedup,
    )


def select_width(
    config: EgtConfig,
    depth: int,
    drafter: DrafterDistribution,
    profiles: ProfilePair,
    model: AcceptanceModel | None = None,
) -> int:
    """Candidate width maximizing the speedup objective at this depth.

    Each candidate width grows its own provisional tree from the drafter
    statistics; the expected accepted length comes from the knapsack optimum
    at the verification cap.  Ties go to the smaller width.
    """
    if not 1 <= depth <= config.max_depth:
        raise ValueError(f"depth {depth} outside [1, {config.max_depth}]")
    model = model if model is not None else SurrogateAcceptance()
    best_width = config.candidate_widths[0]
    best_value = -np.inf
    for width in config.candidate_widths:
        tree = new_tree(*drafter.root())
        grow_egt(tree, drafter, depth, width, config.expansion_k)
        probs = freeze_probs(model, tree)
        dp = SubtreeKnapsack(tree, path_products(tree, probs), config.max_verify)
        cap = dp.max_size
        value = tree_speedup(
            SpeedupInputs(
                aal=1.0 + dp.best(0, cap),
                shape=TreeShape(w_draft=width, d_draft=depth, w_verify=cap),
                profiles=profiles,
            )
        )
        if value > best_value + 1e-12:
            best_width, best_value = width, value
    return best_width


def depth_decay_aal(p0: float, gamma: float, w_draft: int, d_draft: int) -> float:
    """Closed-form expected accepted length of the caterpillar-shaped tree.

    Under a depth-rank acceptance model the strongly concentrated growth
    limit hangs each level's ``w_draft`` nodes under the previous level's
    best node.  Every level then contributes its parent's path product times
    ``p0 * gamma**depth`` (its rank shares sum to one), which gives a
    recurrence cheap enough for width selection shortcuts.
    """
    if not 0.0 <= p0 <= 1.0:
        raise ValueError(f"p0 {p0} must be in [0, 1]")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma {gamma} must be in [0, 1]")
    if w_draft < 1 or d_draft < 1:
        raise ValueError("w_draft and d_draft must be >= 1")
    top_share = DepthDecayAcceptance.rank_share(0, w_draft)
    total = 1.0
    top_path = 1.0
    for level in range(d_draft + 1):
        level_rate = p0 * gamma**level
        # Rank shares within the level sum to one, so the level's path
        # products sum to the parent's path product times the level rate.
        total += top_path * level_rate
        top_path *= level_rate * (1.0 if level == 0 else top_share)
    return total
