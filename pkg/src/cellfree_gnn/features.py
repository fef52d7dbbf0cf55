"""Hand-designed node / edge / graph statistics.

These are the traditional feature-engineering baselines: degree and
closeness centrality, local clustering, neighborhood-overlap scores for
node pairs, and 3-node graphlet counts. Directed edges are treated as
undirected (both-direction neighborhoods) for the node and graph
statistics; pairwise scores document their direction handling inline.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import GraphBuildError
from .graph import Graph


@dataclass
class FeatureTable:
    level: str  # node | edge | graph
    names: list[str]
    values: np.ndarray  # one row per entity

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def to_csv(self, id_labels=None) -> str:
        """CSV text: id column first, then one column per feature name."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id"] + self.names)
        for i, row in enumerate(self.values):
            label = id_labels[i] if id_labels is not None else i
            writer.writerow([label] + [repr(float(x)) for x in row])
        return buf.getvalue()


def _bfs_distances(g: Graph, start: int, direction: str = "both") -> np.ndarray:
    dist = np.full(g.num_nodes, -1, dtype=np.int64)
    dist[start] = 0
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for u in g.neighbors(v, direction):
            if dist[u] < 0:
                dist[u] = dist[v] + 1
                queue.append(int(u))
    return dist


def node_statistics(g: Graph) -> FeatureTable:
    """Per-node [degree, closeness_centrality, clustering_coefficient].

    degree = |N(v)| over both directions. Closeness is scaled to v's
    connected component: (|C|-1) / sum of distances within C, 0 for an
    isolated node. Clustering = 2*T(v) / (deg*(deg-1)) with T(v) the
    number of edges among v's neighbors, 0 when deg < 2.
    """
    values = np.zeros((g.num_nodes, 3))
    neighbor_sets = [set(g.neighbors(v).tolist()) for v in range(g.num_nodes)]
    for v in range(g.num_nodes):
        deg = len(neighbor_sets[v])
        dist = _bfs_distances(g, v)
        reached = dist > 0
        closeness = reached.sum() / dist[reached].sum() if reached.any() else 0.0
        triangles = 0
        nbrs = sorted(neighbor_sets[v])
        for i, a in enumerate(nbrs):
            for b in nbrs[i + 1:]:
                if b in neighbor_sets[a]:
                    triangles += 1
        clustering = 2.0 * triangles / (deg * (deg - 1)) if deg >= 2 else 0.0
        values[v] = (deg, closeness, clustering)
    return FeatureTable(
        "node", ["degree", "closeness_centrality", "clustering_coefficient"], values
    )


def edge_scores(g: Graph, pairs, katz_beta: float = 0.1, katz_lmax: int = 3) -> FeatureTable:
    """Pairwise [shortest_path, common_neighbors, jaccard, katz] scores.

    shortest_path follows edge direction (BFS over out-neighbors, -1 if
    unreachable); overlap scores use both-direction neighborhoods; katz
    sums beta^l * (#directed walks of length l from u to v) up to
    katz_lmax. On undirected graphs all of these reduce to the usual
    symmetric definitions.
    """
    pairs = [(int(u), int(v)) for u, v in pairs]
    for u, v in pairs:
        if not (0 <= u < g.num_nodes and 0 <= v < g.num_nodes):
            raise GraphBuildError(f"pair ({u}, {v}) references an invalid node id")
    neighbor_sets = [set(g.neighbors(v).tolist()) for v in range(g.num_nodes)]
    values = np.zeros((len(pairs), 4))
    sources = {u for u, _ in pairs}
    dist_from = {u: _bfs_distances(g, u, "out") for u in sources}
    for row, (u, v) in enumerate(pairs):
        sp = float(dist_from[u][v])
        inter = len(neighbor_sets[u] & neighbor_sets[v])
        union = len(neighbor_sets[u] | neighbor_sets[v])
        jaccard = inter / union if union else 0.0
        values[row] = (sp, inter, jaccard, _katz(g, u, v, katz_beta, katz_lmax))
    return FeatureTable(
        "edge", ["shortest_path", "common_neighbors", "jaccard", "katz"], values
    )


def _katz(g: Graph, u: int, v: int, beta: float, l_max: int) -> float:
    # walk-count DP along out-neighbors; counts[w] = #walks u->w of length l
    counts = np.zeros(g.num_nodes)
    counts[u] = 1.0
    total = 0.0
    weight = 1.0
    for _ in range(l_max):
        nxt = np.zeros(g.num_nodes)
        for w in np.nonzero(counts)[0]:
            for x in g.neighbors(int(w), "out"):
                nxt[x] += counts[w]
        counts = nxt
        weight *= beta
        total += weight * counts[v]
    return total


def graph_statistics(g: Graph) -> FeatureTable:
    """Whole-graph [num_nodes, num_edges, triangle_count, wedge_count].

    3-node graphlets on the undirected view: a wedge is any path of
    length 2 (closed or open), so a triangle contributes 3 wedges and 1
    triangle. Counts are exact, by enumeration over neighbor pairs.
    """
    neighbor_sets = [set(g.neighbors(v).tolist()) for v in range(g.num_nodes)]
    wedges = 0
    triangle_ends = 0
    for v in range(g.num_nodes):
        nbrs = sorted(neighbor_sets[v])
        for i, a in enumerate(nbrs):
            for b in nbrs[i + 1:]:
                wedges += 1
                if b in neighbor_sets[a]:
                    triangle_ends += 1
    values = np.array(
        [[g.num_nodes, g.num_edges, triangle_ends // 3, wedges]], dtype=np.float64
    )
    return FeatureTable(
        "graph", ["num_nodes", "num_edges", "triangle_count", "wedge_count"], values
    )
