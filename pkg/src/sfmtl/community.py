"""Modularity, Louvain community detection, and an exhaustive oracle.

Conventions: ``sigma_in`` of a community is the sum of adjacency entries
over ordered member pairs (self-loops included), i.e. twice the internal
weight. A node's link weight into a community enters the gain formula
doubled, which is what makes the gain equal the change in modularity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import SizeError
from .graph import SimilarityGraph

CONVERGENCE_TOL = 1e-9
MOVE_TOL = 1e-12
BRUTE_FORCE_MAX_NODES = 12


@dataclass
class Partition:
    nodes: list[int]
    labels: np.ndarray  # dense community ids, first-appearance order

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (len(self.nodes),):
            raise ValueError(f"{len(labels)} labels for {len(self.nodes)} nodes")
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=int)
        rank[np.argsort(first)] = np.arange(len(first))
        self.labels = rank[inverse].reshape(-1)

    @classmethod
    def singletons(cls, nodes: Sequence[int]) -> Partition:
        return cls(list(nodes), np.arange(len(nodes)))

    @classmethod
    def whole(cls, nodes: Sequence[int]) -> Partition:
        return cls(list(nodes), np.zeros(len(nodes), dtype=int))

    @classmethod
    def from_groups(cls, nodes: Sequence[int], groups: Sequence[Sequence[int]]) -> Partition:
        where = {n: g for g, members in enumerate(groups) for n in members}
        return cls(list(nodes), np.array([where[n] for n in nodes]))

    @property
    def assignment(self) -> dict[int, int]:
        return dict(zip(self.nodes, self.labels.tolist()))

    @property
    def n_communities(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def communities(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for n, c in zip(self.nodes, self.labels.tolist()):
            out.setdefault(c, []).append(n)
        return out

    def same_grouping(self, other: Partition) -> bool:
        b = other.assignment
        if set(self.nodes) != set(b):
            return False
        return np.array_equal(self.labels, Partition(self.nodes, [b[n] for n in self.nodes]).labels)


def adjusted_rand_index(a: Partition, b: Partition) -> float:
    """Hubert-Arabie ARI between two partitions of the same node set."""
    where = b.assignment
    y = np.array([where[n] for n in a.nodes])
    table = np.zeros((a.n_communities, int(y.max()) + 1))
    np.add.at(table, (a.labels, y), 1)
    pairs = lambda v: (v * (v - 1) / 2.0).sum()
    index = pairs(table)
    rows, cols = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = pairs(np.array([len(a.nodes)], dtype=float))
    expected = rows * cols / total if total else 0.0
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def _one_hot(labels: np.ndarray) -> np.ndarray:
    p = np.zeros((len(labels), int(labels.max()) + 1 if len(labels) else 0))
    p[np.arange(len(labels)), labels] = 1.0
    return p


def _modularity_from_labels(adj: np.ndarray, degrees: np.ndarray, m2: float, labels: np.ndarray) -> float:
    p = _one_hot(labels)
    sigma_in = np.einsum("ic,ij,jc->c", p, adj, p)
    sigma_tot = p.T @ degrees
    return float((sigma_in / m2 - (sigma_tot / m2) ** 2).sum())


def modularity(graph: SimilarityGraph, partition: Partition) -> float:
    """Newman modularity; a graph without edges scores 0 by convention."""
    if len(partition.nodes) != len(graph.nodes) or set(partition.nodes) != set(graph.nodes):
        raise ValueError("partition does not cover the graph's nodes")
    m2 = 2.0 * graph.total_weight
    if m2 <= 0:
        return 0.0
    where = partition.assignment
    labels = np.array([where[n] for n in graph.nodes])
    return _modularity_from_labels(graph.adjacency, graph.degrees, m2, labels)


def coarsen(graph: SimilarityGraph, partition: Partition) -> SimilarityGraph:
    """One node per community; the diagonal holds twice each community's internal weight."""
    where = partition.assignment
    p = _one_hot(np.array([where[n] for n in graph.nodes]))
    c = p.T @ graph.adjacency @ p
    return SimilarityGraph(list(range(p.shape[1])), 0.5 * (c + c.T))  # exact symmetry despite rounding


class LouvainState:
    """Running community sums for the local-move phase on one graph level."""

    def __init__(self, graph: SimilarityGraph, labels: np.ndarray | None = None):
        self.adj = graph.adjacency
        self.degrees = graph.degrees
        self.m2 = 2.0 * graph.total_weight
        n = len(graph)
        self.labels = np.arange(n) if labels is None else np.array(labels, dtype=int)
        size = max(n, int(self.labels.max()) + 1 if n else 0)
        self.sigma_in = np.zeros(size)
        self.sigma_tot = np.zeros(size)
        for c in range(size):
            members = self.labels == c
            self.sigma_in[c] = self.adj[np.ix_(members, members)].sum()
            self.sigma_tot[c] = self.degrees[members].sum()
        self.q = self.recompute_modularity()

    def recompute_modularity(self) -> float:
        if self.m2 <= 0:
            return 0.0
        return float((self.sigma_in / self.m2 - (self.sigma_tot / self.m2) ** 2).sum())

    def links(self, node: int) -> np.ndarray:
        """Weight from ``node`` into each community, ignoring its self-loop."""
        row = self.adj[node].copy()
        row[node] = 0.0
        return np.bincount(self.labels, weights=row, minlength=len(self.sigma_tot))

    def remove(self, node: int, k_in: float) -> None:
        c = self.labels[node]
        self.sigma_in[c] -= 2.0 * k_in + self.adj[node, node]
        self.sigma_tot[c] -= self.degrees[node]
        self.labels[node] = -1

    def insert(self, node: int, community: int, k_in: float) -> None:
        self.sigma_in[community] += 2.0 * k_in + self.adj[node, node]
        self.sigma_tot[community] += self.degrees[node]
        self.labels[node] = community

    def gain(self, node: int, community: int, k_in: float) -> float:
        """Modularity change from inserting a detached ``node`` into ``community``."""
        m2 = self.m2
        s_in, s_tot, d = self.sigma_in[community], self.sigma_tot[community], self.degrees[node]
        after = (s_in + 2.0 * k_in) / m2 - ((s_tot + d) / m2) ** 2
        before = s_in / m2 - (s_tot / m2) ** 2 - (d / m2) ** 2
        return after - before

    def detached_labels(self, node: int) -> np.ndarray:
        labels = self.labels.copy()
        labels[node] = len(self.sigma_tot)
        return labels


def modularity_gain(state: LouvainState, graph: SimilarityGraph, node: int, target_community: int) -> float:
    """Gain for moving a node (by position in ``graph``) that is currently detached."""
    if state.labels[node] == target_community:
        raise ValueError("node already belongs to the target community")
    row = graph.adjacency[node]
    members = state.labels == target_community
    k_in = float(row[members].sum()) - (row[node] if members[node] else 0.0)
    return state.gain(node, target_community, k_in)


MoveHook = Callable[[SimilarityGraph, np.ndarray, int, int, float], None]


def _local_moves(graph: SimilarityGraph, state: LouvainState, rng: np.random.Generator, on_move: MoveHook | None) -> bool:
    moved_any = False
    improved = True
    while improved:
        improved = False
        for node in rng.permutation(len(graph)):
            node = int(node)
            links = state.links(node)
            home = int(state.labels[node])
            state.remove(node, links[home])
            stay = state.gain(node, home, links[home])
            best_c, best = home, stay
            neighbours = np.flatnonzero(graph.adjacency[node] > 0)
            candidates = sorted({int(state.labels[j]) for j in neighbours if j != node} - {home})
            for c in candidates:
                g = state.gain(node, c, links[c])
                if on_move is not None:
                    on_move(graph, state.detached_labels(node), node, c, g)
                if g > best + MOVE_TOL:
                    best_c, best = c, g
            state.insert(node, best_c, links[best_c])
            if best_c != home:
                state.q += best - stay
                improved = moved_any = True
    return moved_any


def louvain(
    graph: SimilarityGraph,
    rng: np.random.Generator,
    *,
    on_move: MoveHook | None = None,
    phase_log: list[float] | None = None,
) -> Partition:
    """Greedy local moves in random node order, then coarsening, until modularity stalls.

    ``on_move`` sees every attempted move as (level graph, labels with the
    node detached as its own community, node, target, gain). ``phase_log``
    receives the incrementally tracked modularity after each phase.
    """
    n = len(graph)
    if n == 0 or graph.is_empty:
        if phase_log is not None:
            phase_log.append(0.0)
        return Partition.singletons(graph.nodes)

    membership = np.arange(n)
    level = graph
    q = LouvainState(graph).q
    if phase_log is not None:
        phase_log.append(q)
    while True:
        state = LouvainState(level)
        state.q = q
        moved = _local_moves(level, state, rng, on_move)
        if not moved:
            break
        labels = Partition(level.nodes, state.labels).labels
        membership = labels[membership]
        gained = state.q - q
        q = state.q
        if phase_log is not None:
            phase_log.append(q)
        if gained < CONVERGENCE_TOL:
            break
        level = coarsen(level, Partition(level.nodes, labels))
    return Partition(graph.nodes, membership)


def set_partitions(n: int) -> Iterator[np.ndarray]:
    """All set partitions of range(n) as restricted-growth label arrays."""
    if n == 0:
        yield np.zeros(0, dtype=int)
        return
    labels = np.zeros(n, dtype=int)

    def grow(i: int, k: int):
        if i == n:
            yield labels.copy()
            return
        for c in range(k + 1):
            labels[i] = c
            yield from grow(i + 1, max(k, c + 1))

    labels[0] = 0
    yield from grow(1, 1)


def brute_force_best_partition(graph: SimilarityGraph) -> tuple[Partition, float]:
    """Exhaustive modularity maximisation; refuses graphs above 12 nodes."""
    n = len(graph)
    if n > BRUTE_FORCE_MAX_NODES:
        raise SizeError(f"brute force limited to {BRUTE_FORCE_MAX_NODES} nodes, graph has {n}")
    m2 = 2.0 * graph.total_weight
    if n == 0 or m2 <= 0:
        return Partition.singletons(graph.nodes), 0.0
    b = graph.adjacency - np.outer(graph.degrees, graph.degrees) / m2
    best_labels, best_q = None, -np.inf
    for labels in set_partitions(n):
        q = float(b[labels[:, None] == labels[None, :]].sum() / m2)
        if q > best_q + MOVE_TOL:
            best_labels, best_q = labels, q
    return Partition(graph.nodes, best_labels), best_q
