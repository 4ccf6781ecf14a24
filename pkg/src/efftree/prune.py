"""Split complexity and weakest-link pruning.

The split complexity of a tree is the sum of its internal-node statistics
minus a penalty per internal node. Weakest-link pruning repeatedly removes
the branch whose internal nodes have the smallest mean statistic, producing
a nested sequence of candidate subtrees that ends at the root-only tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

from .tree import Tree

DEFAULT_LAMBDA = 3.84  # 95th percentile of chi-square with 1 df


def split_complexity(tree: Tree, lam: float,
                     g_values: Optional[Mapping[int, float]] = None) -> float:
    """Sum of internal-node statistics minus lam times the internal count."""
    internal = tree.internal_ids()
    if g_values is None:
        total = sum(tree.node(i).statistic for i in internal)
    else:
        total = sum(g_values[i] for i in internal)
    return total - lam * len(internal)


def branch_mean_statistic(tree: Tree, node_id: int) -> float:
    """Mean statistic over the internal nodes of the branch rooted at node_id."""
    ids = tree.branch_internal(node_id)
    return sum(tree.node(i).statistic for i in ids) / len(ids)


@dataclass
class PruneSequence:
    """Nested candidate subtrees from the full tree down to root-only."""

    trees: list[Tree]
    pruned_node_per_step: list[int]

    def __len__(self) -> int:
        return len(self.trees)

    def to_dict(self) -> dict:
        return {
            "trees": [tree.to_dict() for tree in self.trees],
            "pruned_node_per_step": list(self.pruned_node_per_step),
        }


def weakest_link_sequence(tree: Tree) -> PruneSequence:
    """Candidate subtree sequence by repeatedly dropping the weakest branch.

    At each step the internal node h minimizing the branch mean statistic
    g(h) loses all its descendants (keeping its own effect estimate); ties
    prefer the smaller node id. The sequence starts at the input tree and
    ends at the root-only tree.
    """
    trees = [tree]
    pruned: list[int] = []
    current = tree
    while current.n_internal() > 0:
        best_id = min(
            current.internal_ids(),
            key=lambda h: (branch_mean_statistic(current, h), h),
        )
        current = current.prune_at(best_id)
        trees.append(current)
        pruned.append(best_id)
    return PruneSequence(trees, pruned)
