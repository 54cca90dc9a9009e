"""Entropy-guided root selection and k-hop tree extraction.

Roots are ranked by the Shannon entropy of the distribution obtained by
normalizing the incident edge weights; high entropy means diverse local
connectivity.  From each selected root a BFS tree of depth <= k is cut out
of the graph: cross edges inside the k-hop ball are dropped, so the result
is a tree, not the induced subgraph.
"""

from __future__ import annotations

import dataclasses
from collections import deque

import numpy as np

from .graphs import WeightedGraph


class MTooLargeError(ValueError):
    def __init__(self, m: int, n: int):
        super().__init__(f"requested {m} roots from a {n}-node graph")
        self.m = m
        self.n = n


@dataclasses.dataclass(frozen=True)
class Subtree:
    """Rooted BFS tree: nodes in discovery order (root first), edges as
    (parent, child, weight) triples carrying source-graph weights."""

    root: int
    nodes: tuple
    edges: tuple
    depth: int


@dataclasses.dataclass(frozen=True)
class RootRanking:
    """Per-node entropy scores plus the full ranking; ``roots`` keeps the
    top-m selection.  Ties are broken by ascending node id."""

    scores: np.ndarray
    order: tuple
    roots: tuple

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)


def node_entropy(g: WeightedGraph, v: int) -> float:
    """Entropy (nats) of the incident-weight distribution at node v.

    Nodes with at most one positive-weight neighbor score 0 by convention.
    The distribution is scale-free: multiplying all weights by c > 0 leaves
    the result unchanged.
    """
    w = g.adj[v]
    pos = w[w > 0]
    if pos.size <= 1:
        return 0.0
    p = pos / pos.sum()
    return float(-(p * np.log(p)).sum())


def select_roots(g: WeightedGraph, m: int) -> RootRanking:
    """Rank all nodes by entropy (descending, ties by id) and keep the top m."""
    if m > g.n:
        raise MTooLargeError(m, g.n)
    if m < 1:
        raise ValueError("m must be >= 1")
    scores = np.array([node_entropy(g, v) for v in range(g.n)])
    order = tuple(sorted(range(g.n), key=lambda v: (-scores[v], v)))
    return RootRanking(scores=scores, order=order, roots=order[:m])


def extract_khop_tree(g: WeightedGraph, root: int, k: int) -> Subtree:
    """BFS tree of depth <= k rooted at ``root`` over positive-weight edges.

    Each node enters through its first discovered parent; neighbors are
    visited in ascending node id, which makes the result deterministic.
    An isolated root yields the singleton tree with no edges.
    """
    if not 0 <= root < g.n:
        raise ValueError(f"root {root} out of range for {g.n} nodes")
    if k < 1:
        raise ValueError("k must be >= 1")
    adj = g.adj
    depth_of = {root: 0}
    nodes = [root]
    edges = []
    queue = deque([root])
    while queue:
        v = queue.popleft()
        if depth_of[v] == k:
            continue
        for u in np.flatnonzero(adj[v] > 0):
            u = int(u)
            if u not in depth_of:
                depth_of[u] = depth_of[v] + 1
                nodes.append(u)
                edges.append((v, u, float(adj[v, u])))
                queue.append(u)
    return Subtree(root=root, nodes=tuple(nodes), edges=tuple(edges), depth=k)


def extract_all(g: WeightedGraph, m: int, k: int) -> list:
    """The m subtrees rooted at the entropy-selected nodes, in ranking order."""
    ranking = select_roots(g, m)
    return [extract_khop_tree(g, r, k) for r in ranking.roots]


def tree_adjacency(t: Subtree) -> np.ndarray:
    """Dense adjacency of the subtree over local indices (t.nodes order)."""
    index = {v: i for i, v in enumerate(t.nodes)}
    a = np.zeros((len(t.nodes), len(t.nodes)))
    for p, c, w in t.edges:
        a[index[p], index[c]] = w
        a[index[c], index[p]] = w
    return a
