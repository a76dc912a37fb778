"""Draft-tree data structure for speculative decoding.

A :class:`TokenTree` holds the tokens drafted ahead of the last confirmed
token.  Node 0 is the root, the first speculated token, and every other
node references an earlier node as its parent, so the node list is always
in topological order.  Each node carries the drafter probability that is
used as a cheap surrogate for its acceptance probability.

The tree is append-only: nodes are attached with :meth:`TokenTree.add_child`
and never removed.  Pruning elsewhere builds a fresh tree through
:meth:`TokenTree.subtree`.  Once construction is finished a tree can be
shared read-only across threads.

Derived structure needed for batched verification is exposed here as well:
per-depth level lists, leaf positions, root-to-node paths, and the
tree-causal attention mask (:func:`build_mask`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError

# Slack allowed when checking that sibling probabilities sum to at most one.
SIBLING_SUM_TOL = 1e-9


@dataclass
class TreeNode:
    """One drafted token.

    ``parent`` is ``None`` only for the root.  ``depth`` is 0 for the root
    and parent depth + 1 otherwise.  ``surrogate_prob`` is the drafter's
    probability for this token, used as an acceptance surrogate.
    """

    token: int
    parent: int | None
    depth: int
    surrogate_prob: float


def _check_prob(prob: float) -> None:
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"probability {prob!r} outside [0, 1]")


class TokenTree:
    """Append-only token tree in topological node order."""

    __slots__ = ("nodes", "_children", "_levels", "_leaves")

    def __init__(self, root_token: int, root_prob: float) -> None:
        _check_prob(root_prob)
        self.nodes: list[TreeNode] = [TreeNode(int(root_token), None, 0, float(root_prob))]
        self._children: list[list[int]] = [[]]
        self._levels: list[list[int]] = [[0]]
        self._leaves: set[int] = {0}

    def __len__(self) -> int:
        return len(self.nodes)

    def add_child(self, parent: int, token: int, prob: float) -> int:
        """Attach a new node under ``parent`` and return its index.

        Raises ``IndexError`` for an unknown parent and ``ValueError`` when
        the probability is out of range or would push the sibling sum past
        one.
        """
        if not 0 <= parent < len(self.nodes):
            raise IndexError(f"parent index {parent} out of range for tree of {len(self.nodes)} nodes")
        _check_prob(prob)
        sibling_sum = sum(self.nodes[c].surrogate_prob for c in self._children[parent])
        if sibling_sum + prob > 1.0 + SIBLING_SUM_TOL:
            raise ValueError(
                f"sibling probabilities under node {parent} would sum to {sibling_sum + prob:.12f} > 1"
            )
        index = len(self.nodes)
        depth = self.nodes[parent].depth + 1
        self.nodes.append(TreeNode(int(token), parent, depth, float(prob)))
        self._children.append([])
        self._children[parent].append(index)
        if depth == len(self._levels):
            self._levels.append([])
        self._levels[depth].append(index)
        self._leaves.discard(parent)
        self._leaves.add(index)
        return index

    def children(self, index: int) -> list[int]:
        """Child indices of ``index`` in insertion (ascending) order."""
        return list(self._children[index])

    def parent(self, index: int) -> int | None:
        return self.nodes[index].parent

    def depth(self, index: int) -> int:
        return self.nodes[index].depth

    def is_leaf(self, index: int) -> bool:
        return not self._children[index]

    @property
    def leaf_positions(self) -> set[int]:
        """Indices of nodes without children."""
        return set(self._leaves)

    @property
    def levels(self) -> list[list[int]]:
        """Node indices grouped by depth, ascending within each level."""
        return [list(level) for level in self._levels]

    @property
    def max_depth(self) -> int:
        return len(self._levels) - 1

    def level_rank(self, index: int) -> tuple[int, int]:
        """Rank of a node within its depth level, with the level size.

        Nodes in a level are ranked by insertion order, so the first node
        attached at a given depth has rank zero.
        """
        if not 0 <= index < len(self.nodes):
            raise IndexError(f"node index {index} out of range for tree of {len(self.nodes)} nodes")
        level = self._levels[self.nodes[index].depth]
        return level.index(index), len(level)

    def path_to_root(self, index: int) -> list[int]:
        """Indices from the root down to ``index``, inclusive."""
        if not 0 <= index < len(self.nodes):
            raise IndexError(f"node index {index} out of range for tree of {len(self.nodes)} nodes")
        path = []
        cursor: int | None = index
        while cursor is not None:
            path.append(cursor)
            cursor = self.nodes[cursor].parent
        path.reverse()
        return path

    def subtree(self, keep: Iterable[int]) -> tuple["TokenTree", dict[int, int]]:
        """Copy the connected subtree spanned by ``keep``.

        ``keep`` must contain the root and the parent of every kept node.
        Returns the new tree plus the old-index to new-index mapping.  Node
        order (and therefore sibling order) is preserved.
        """
        kept = sorted(set(keep))
        if not kept or kept[0] != 0:
            raise ValueError("subtree must contain the root (node 0)")
        kept_set = set(kept)
        for index in kept:
            parent = self.nodes[index].parent
            if parent is not None and parent not in kept_set:
                raise ValueError(f"subtree is not connected: node {index} kept without parent {parent}")
        root = self.nodes[0]
        out = TokenTree(root.token, root.surrogate_prob)
        mapping = {0: 0}
        for index in kept[1:]:
            node = self.nodes[index]
            assert node.parent is not None
            mapping[index] = out.add_child(mapping[node.parent], node.token, node.surrogate_prob)
        return out, mapping

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"token": node.token, "parent": node.parent, "prob": node.surrogate_prob}
                for node in self.nodes
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TokenTree":
        """Rebuild a tree, validating every structural invariant."""
        if not isinstance(data, dict) or "nodes" not in data:
            raise ValueError("tree document must be an object with a 'nodes' list")
        entries = data["nodes"]
        if not isinstance(entries, list) or not entries:
            raise ValueError("'nodes' must be a non-empty list")
        first = entries[0]
        if first.get("parent") is not None:
            raise ValueError("node 0 must be the root (parent null)")
        tree = cls(first["token"], first["prob"])
        for position, entry in enumerate(entries[1:], start=1):
            parent = entry.get("parent")
            if parent is None:
                raise ValueError(f"node {position}: only node 0 may omit a parent")
            if not isinstance(parent, int) or not 0 <= parent < position:
                raise ValueError(f"node {position}: parent {parent!r} must be an earlier node index")
            tree.add_child(parent, entry["token"], entry["prob"])
        return tree


def new_tree(token: int = 0, prob: float = 1.0) -> TokenTree:
    """Create a tree holding only the root speculation."""
    return TokenTree(token, prob)


def build_mask(tree: TokenTree) -> np.ndarray:
    """Tree-causal attention mask.

    ``mask[i][j]`` is true iff ``j`` is ``i`` or an ancestor of ``i``.  The
    topological node order makes the matrix lower-triangular, so each row
    can be formed by copying the parent row and setting the diagonal bit.
    """
    size = len(tree)
    mask = np.zeros((size, size), dtype=bool)
    for index, node in enumerate(tree.nodes):
        if node.parent is not None:
            mask[index] = mask[node.parent]
        mask[index, index] = True
    return mask


def save_tree(tree: TokenTree, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tree.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_tree(path: str | Path) -> TokenTree:
    """Load and validate a tree document; invalid files raise :class:`ConfigError`."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return TokenTree.from_dict(data)
    except (OSError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"invalid tree file {path}: {exc}") from exc
