"""Immutable graph data model with neighbor indexing and JSON round-trip.

Node ids are dense zero-based integers. Edges may be directed or
undirected; an undirected edge is stored once in the edge list but
indexed in both directions. Mixed graphs (some directed, some
undirected edges) are supported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphBuildError, SchemaError


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    directed: bool = False


@dataclass(frozen=True)
class Graph:
    """Immutable graph: edge list, node/edge features, CSR neighbor index.

    The neighbor index is split by direction. For node v,
    ``in_list[in_offsets[v]:in_offsets[v+1]]`` holds its in-neighbors
    sorted ascending, and likewise for ``out_*``. An undirected edge
    {u, v} makes each endpoint both an in- and out-neighbor of the other.
    """

    num_nodes: int
    edges: tuple[Edge, ...]
    node_features: np.ndarray
    edge_features: np.ndarray | None
    in_offsets: np.ndarray = field(repr=False)
    in_list: np.ndarray = field(repr=False)
    out_offsets: np.ndarray = field(repr=False)
    out_list: np.ndarray = field(repr=False)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def neighbors(self, v: int, direction: str = "both") -> np.ndarray:
        """Neighbor ids of v, sorted ascending.

        direction: "in" (edges ending at v), "out" (edges leaving v), or
        "both" (set union). Undirected edges count in every direction.
        """
        if not 0 <= v < self.num_nodes:
            raise GraphBuildError(f"node id {v} out of range [0, {self.num_nodes})")
        if direction == "in":
            return self.in_list[self.in_offsets[v]:self.in_offsets[v + 1]].copy()
        if direction == "out":
            return self.out_list[self.out_offsets[v]:self.out_offsets[v + 1]].copy()
        if direction == "both":
            ins = self.in_list[self.in_offsets[v]:self.in_offsets[v + 1]]
            outs = self.out_list[self.out_offsets[v]:self.out_offsets[v + 1]]
            return np.union1d(ins, outs)
        raise GraphBuildError(f"unknown direction {direction!r}")

    def degree(self, v: int, direction: str = "both") -> int:
        return len(self.neighbors(v, direction))

    def message_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed message pairs (sources, targets) for aggregation.

        One pair per in-neighbor relation: sources[k] -> targets[k].
        Ordered by target, then source, so aggregation order is
        deterministic. Undirected edges yield a pair in each direction.
        """
        counts = np.diff(self.in_offsets)
        targets = np.repeat(np.arange(self.num_nodes, dtype=np.int64), counts)
        return self.in_list.copy(), targets

    def to_json(self) -> str:
        return serialize_graph(self)


def build_graph(num_nodes, edge_list, node_features=None, edge_features=None) -> Graph:
    """Validate inputs and build an immutable graph with its neighbor index.

    edge_list entries are (src, dst) or (src, dst, directed) tuples or
    Edge objects; direction defaults to undirected. Self-loops and
    duplicate edges (any edge covering an already-covered directed pair)
    are rejected; feature row counts must match node/edge counts.
    """
    if num_nodes < 0:
        raise GraphBuildError("num_nodes must be >= 0")
    edges = []
    for e in edge_list:
        if isinstance(e, Edge):
            edges.append(e)
        else:
            src, dst = int(e[0]), int(e[1])
            directed = bool(e[2]) if len(e) > 2 else False
            edges.append(Edge(src, dst, directed))

    covered: set[tuple[int, int]] = set()
    for e in edges:
        if not (0 <= e.src < num_nodes and 0 <= e.dst < num_nodes):
            raise GraphBuildError(
                f"edge ({e.src}, {e.dst}) references a node id outside [0, {num_nodes})"
            )
        if e.src == e.dst:
            raise GraphBuildError(f"self-loop at node {e.src} is not allowed")
        pairs = [(e.src, e.dst)] if e.directed else [(e.src, e.dst), (e.dst, e.src)]
        for p in pairs:
            if p in covered:
                raise GraphBuildError(f"duplicate edge covering direction {p[0]}->{p[1]}")
            covered.add(p)

    if node_features is None:
        node_features = np.zeros((num_nodes, 0), dtype=np.float64)
    node_features = np.asarray(node_features, dtype=np.float64)
    if node_features.ndim != 2 or node_features.shape[0] != num_nodes:
        raise GraphBuildError(
            f"node_features must have {num_nodes} rows, got shape {node_features.shape}"
        )
    if edge_features is not None:
        edge_features = np.asarray(edge_features, dtype=np.float64)
        if edge_features.ndim != 2 or edge_features.shape[0] != len(edges):
            raise GraphBuildError(
                f"edge_features must have {len(edges)} rows, got shape "
                f"{edge_features.shape}"
            )

    in_adj: list[list[int]] = [[] for _ in range(num_nodes)]
    out_adj: list[list[int]] = [[] for _ in range(num_nodes)]
    for e in edges:
        out_adj[e.src].append(e.dst)
        in_adj[e.dst].append(e.src)
        if not e.directed:
            out_adj[e.dst].append(e.src)
            in_adj[e.src].append(e.dst)

    in_offsets, in_list = _csr(in_adj)
    out_offsets, out_list = _csr(out_adj)

    node_features.setflags(write=False)
    if edge_features is not None:
        edge_features.setflags(write=False)
    return Graph(
        num_nodes=num_nodes,
        edges=tuple(edges),
        node_features=node_features,
        edge_features=edge_features,
        in_offsets=in_offsets,
        in_list=in_list,
        out_offsets=out_offsets,
        out_list=out_list,
    )


def _csr(adj: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(adj) + 1, dtype=np.int64)
    for v, nbrs in enumerate(adj):
        offsets[v + 1] = offsets[v] + len(nbrs)
    flat = np.empty(offsets[-1], dtype=np.int64)
    for v, nbrs in enumerate(adj):
        flat[offsets[v]:offsets[v + 1]] = sorted(nbrs)
    flat.setflags(write=False)
    offsets.setflags(write=False)
    return offsets, flat


def adjacency_dense(g: Graph, cap: int = 10_000) -> np.ndarray:
    """Dense 0/1 adjacency; A[i, j] = 1 iff there is an edge i->j.

    Undirected edges set both A[i, j] and A[j, i]. Intended for small
    graphs and reference computations only, hence the node cap.
    """
    if g.num_nodes > cap:
        raise GraphBuildError(f"dense adjacency capped at {cap} nodes, graph has {g.num_nodes}")
    a = np.zeros((g.num_nodes, g.num_nodes), dtype=np.float64)
    for e in g.edges:
        a[e.src, e.dst] = 1.0
        if not e.directed:
            a[e.dst, e.src] = 1.0
    return a


def permute(g: Graph, permutation) -> Graph:
    """Relabel nodes: node i of the input becomes node permutation[i].

    permutation must be a bijection on [0, num_nodes). Feature rows move
    with their nodes; edge order and edge features are preserved.
    """
    perm = np.asarray(permutation, dtype=np.int64)
    if perm.shape != (g.num_nodes,) or not np.array_equal(
        np.sort(perm), np.arange(g.num_nodes)
    ):
        raise GraphBuildError("permutation must be a bijection on node ids")
    new_edges = [Edge(int(perm[e.src]), int(perm[e.dst]), e.directed) for e in g.edges]
    new_features = np.empty_like(g.node_features)
    new_features[perm] = g.node_features
    return build_graph(g.num_nodes, new_edges, new_features, g.edge_features)


def merge_graphs(graphs: list[Graph]) -> tuple[Graph, np.ndarray]:
    """Disjoint union of graphs with node ids offset per block.

    Returns the merged graph and the node-id offset of each input block.
    All inputs must share the node feature dimension. Edge features are
    dropped (none of the consumers batch them).
    """
    if not graphs:
        raise GraphBuildError("merge_graphs requires at least one graph")
    dims = {g.feature_dim for g in graphs}
    if len(dims) != 1:
        raise GraphBuildError(f"feature dims differ across graphs: {sorted(dims)}")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])[:-1]
    edges = []
    for off, g in zip(offsets, graphs):
        for e in g.edges:
            edges.append(Edge(e.src + int(off), e.dst + int(off), e.directed))
    features = np.vstack([g.node_features for g in graphs])
    total = int(sum(g.num_nodes for g in graphs))
    return build_graph(total, edges, features), offsets


def serialize_graph(g: Graph) -> str:
    """JSON text for a graph; floats keep full round-trip precision."""
    doc = {
        "num_nodes": g.num_nodes,
        "edges": [{"src": e.src, "dst": e.dst, "directed": e.directed} for e in g.edges],
        "node_features": [[float(x) for x in row] for row in g.node_features],
    }
    if g.edge_features is not None:
        doc["edge_features"] = [[float(x) for x in row] for row in g.edge_features]
    return json.dumps(doc)


def deserialize_graph(text: str) -> Graph:
    """Parse graph JSON, validating the schema; errors name the bad field."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("document root must be an object")
    for key in ("num_nodes", "edges", "node_features"):
        if key not in doc:
            raise SchemaError(f"missing required key {key!r}")
    num_nodes = doc["num_nodes"]
    if not isinstance(num_nodes, int) or num_nodes < 0:
        raise SchemaError("num_nodes: must be a non-negative integer")
    if not isinstance(doc["edges"], list):
        raise SchemaError("edges: must be a list")
    edges = []
    for i, item in enumerate(doc["edges"]):
        if not isinstance(item, dict):
            raise SchemaError(f"edges[{i}]: must be an object")
        for key in ("src", "dst"):
            if key not in item or not isinstance(item[key], int):
                raise SchemaError(f"edges[{i}].{key}: must be an integer")
        directed = item.get("directed", False)
        if not isinstance(directed, bool):
            raise SchemaError(f"edges[{i}].directed: must be a boolean")
        edges.append(Edge(item["src"], item["dst"], directed))
    feats = doc["node_features"]
    if not isinstance(feats, list):
        raise SchemaError("node_features: must be a list of rows")
    if len(feats) != num_nodes:
        raise SchemaError(
            f"node_features: expected {num_nodes} rows, got {len(feats)}"
        )
    widths = {len(row) for row in feats} if feats else {0}
    if len(widths) > 1:
        raise SchemaError("node_features: rows have inconsistent lengths")
    node_features = np.array(feats, dtype=np.float64).reshape(num_nodes, widths.pop())
    edge_features = None
    if "edge_features" in doc and doc["edge_features"] is not None:
        ef = doc["edge_features"]
        if not isinstance(ef, list) or len(ef) != len(edges):
            raise SchemaError(f"edge_features: expected {len(edges)} rows")
        edge_features = np.array(ef, dtype=np.float64)
        if edge_features.ndim == 1:
            edge_features = edge_features.reshape(len(edges), 0)
    try:
        return build_graph(num_nodes, edges, node_features, edge_features)
    except GraphBuildError as exc:
        raise SchemaError(str(exc)) from exc
