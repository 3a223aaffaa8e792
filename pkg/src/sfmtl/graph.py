"""Task-similarity graph built from classification heads and feature anchors."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import ConfigurationError, FormatError
from .model import FeatureAnchorSet

NORM_EPS = 1e-12

Head = tuple[np.ndarray, np.ndarray]  # (W: d_h x C, b: C)


@dataclass(frozen=True)
class GraphConfig:
    alpha: float = 0.49

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class SimilarityGraph:
    """Weighted undirected graph over client ids.

    The diagonal is zero for graphs built from clients. Coarsened graphs
    carry self-loops on the diagonal, stored as twice the intra-community
    weight so that row sums stay equal to degrees.
    """

    nodes: list[int]
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=float)
        if a.shape != (len(self.nodes), len(self.nodes)):
            raise ConfigurationError(f"adjacency {a.shape} does not match {len(self.nodes)} nodes")
        if not np.array_equal(a, a.T):
            raise ConfigurationError("adjacency must be symmetric")
        if (a < 0).any():
            raise ConfigurationError("edge weights must be non-negative")
        self.adjacency = a

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def total_weight(self) -> float:
        return float(self.adjacency.sum() / 2.0)

    @property
    def is_empty(self) -> bool:
        return self.total_weight <= 0.0

    def laplacian(self) -> np.ndarray:
        a = self.adjacency - np.diag(np.diag(self.adjacency))
        return np.diag(a.sum(axis=1)) - a

    def weight(self, k: int, l: int) -> float:
        idx = {n: i for i, n in enumerate(self.nodes)}
        return float(self.adjacency[idx[k], idx[l]])

    def edges(self) -> Iterable[tuple[int, int, float]]:
        """Unordered edges with positive weight (self-loops included)."""
        n = len(self.nodes)
        for i in range(n):
            for j in range(i, n):
                if self.adjacency[i, j] > 0:
                    yield self.nodes[i], self.nodes[j], float(self.adjacency[i, j])

    @classmethod
    def empty(cls, nodes: Sequence[int]) -> SimilarityGraph:
        return cls(list(nodes), np.zeros((len(nodes), len(nodes))))


def cos_sim(u, v) -> float:
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ConfigurationError(f"cosine of vectors with lengths {u.size} and {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _shared_classes(a: FeatureAnchorSet, b: FeatureAnchorSet) -> list[int]:
    return sorted(set(a.anchors) & set(b.anchors))


def sim_repr(anchors_k: FeatureAnchorSet, anchors_l: FeatureAnchorSet) -> float:
    shared = _shared_classes(anchors_k, anchors_l)
    if not shared:
        return 0.0
    return float(np.mean([cos_sim(anchors_k[c], anchors_l[c]) for c in shared]))


def head_response(head: Head, h: np.ndarray) -> np.ndarray:
    w, b = head
    return h @ w + b


def sim_head(head_k: Head, head_l: Head, anchors_k: FeatureAnchorSet, anchors_l: FeatureAnchorSet) -> float:
    """Agreement of two heads' logits on both clients' anchors, averaged over shared classes."""
    if head_k[0].shape != head_l[0].shape or head_k[1].shape != head_l[1].shape:
        raise ConfigurationError(f"head shapes differ: {head_k[0].shape} vs {head_l[0].shape}")
    shared = _shared_classes(anchors_k, anchors_l)
    if not shared:
        return 0.0
    scores = []
    for c in shared:
        s = 0.0
        for h in (anchors_k[c], anchors_l[c]):
            s += cos_sim(head_response(head_k, h), head_response(head_l, h))
        scores.append(0.5 * s)
    return float(np.mean(scores))


def edge_weight(config: GraphConfig, s_head: float, s_repr: float) -> float:
    return max(config.alpha * s_head + (1.0 - config.alpha) * s_repr, 0.0)


def build_graph(clients: Sequence[tuple[int, Head, FeatureAnchorSet]], config: GraphConfig) -> SimilarityGraph:
    nodes = [c[0] for c in clients]
    n = len(nodes)
    adj = np.zeros((n, n))
    for i in range(n):
        _, head_i, anchors_i = clients[i]
        for j in range(i + 1, n):
            _, head_j, anchors_j = clients[j]
            w = edge_weight(config, sim_head(head_i, head_j, anchors_i, anchors_j), sim_repr(anchors_i, anchors_j))
            adj[i, j] = adj[j, i] = w
    return SimilarityGraph(nodes, adj)


EDGE_HEADER = ["round", "src", "dst", "weight"]


def write_edge_list(graph: SimilarityGraph, out: TextIO, round_index: int, header: bool = True) -> None:
    writer = csv.writer(out, lineterminator="\n")
    if header:
        writer.writerow(EDGE_HEADER)
    for src, dst, w in graph.edges():
        writer.writerow([round_index, src, dst, f"{w:.9g}"])


def edge_list_csv(graph: SimilarityGraph, round_index: int) -> str:
    buf = io.StringIO()
    write_edge_list(graph, buf, round_index)
    return buf.getvalue()


def read_edge_list(path: str | Path, round_index: int | None = None) -> SimilarityGraph:
    """Parse ``src,dst,weight`` rows (an optional ``round`` column is filtered on).

    Nodes are every id that appears; isolated nodes cannot be represented.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"src", "dst", "weight"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: edge list needs src,dst,weight columns, got {reader.fieldnames}")
        rounds = set()
        for lineno, row in enumerate(reader, start=2):
            try:
                r = int(row["round"]) if row.get("round") not in (None, "") else None
                rows.append((r, int(row["src"]), int(row["dst"]), float(row["weight"])))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            rounds.add(r)
    if round_index is None and len(rounds) > 1:
        round_index = max(r for r in rounds if r is not None)
    if round_index is not None:
        rows = [row for row in rows if row[0] == round_index]
    nodes = sorted({r[1] for r in rows} | {r[2] for r in rows})
    index = {n: i for i, n in enumerate(nodes)}
    adj = np.zeros((len(nodes), len(nodes)))
    for _, s, d, w in rows:
        if w < 0:
            raise FormatError(f"{path}: negative weight {w} on edge {s}-{d}")
        i, j = index[s], index[d]
        if i == j:
            adj[i, i] += w
        else:
            adj[i, j] += w
            adj[j, i] += w
    return SimilarityGraph(nodes, adj)
