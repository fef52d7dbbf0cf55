"""Random-walk node embeddings and whole-graph pooling.

Walks are second-order biased: from current node v reached via t, a
neighbor x is weighted 1/p when x == t, 1 when x and t are adjacent,
and 1/q otherwise; the first step is uniform. With p == q == 1 this
collapses to the plain first-order random walk. Co-occurring walk pairs
are embedded with a negative-sampling skip-gram objective trained on the
autodiff engine.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError
from .graph import Graph


@dataclass
class WalkCorpus:
    walks: list[list[int]]
    walk_length: int
    walks_per_node: int
    p: float
    q: float
    seed: int
    num_nodes: int
    node_degrees: np.ndarray = field(repr=False)


def random_walks(
    g: Graph, walk_length: int, walks_per_node: int, p: float = 1.0, q: float = 1.0,
    seed: int = 0,
) -> WalkCorpus:
    """Generate walks_per_node biased walks from every node.

    A walk is a node sequence of up to walk_length nodes following out-
    direction edges; it stops early at a sink. Each (start node, walk
    index) pair draws from its own derived seed, so the corpus is
    reproducible regardless of generation order.
    """
    if p <= 0 or q <= 0:
        raise ConfigError("walk bias parameters p and q must be positive")
    if walk_length < 1 or walks_per_node < 1:
        raise ConfigError("walk_length and walks_per_node must be >= 1")
    out_nbrs = [g.neighbors(v, "out") for v in range(g.num_nodes)]
    nbr_sets = [set(ns.tolist()) for ns in out_nbrs]
    walks = []
    for v in range(g.num_nodes):
        for w in range(walks_per_node):
            rng = np.random.default_rng(np.random.SeedSequence([seed, v, w]))
            walks.append(_one_walk(v, walk_length, p, q, out_nbrs, nbr_sets, rng))
    degrees = np.array([g.degree(v) for v in range(g.num_nodes)], dtype=np.float64)
    return WalkCorpus(
        walks, walk_length, walks_per_node, p, q, seed, g.num_nodes, degrees
    )


def _one_walk(start, walk_length, p, q, out_nbrs, nbr_sets, rng):
    walk = [start]
    while len(walk) < walk_length:
        cur = walk[-1]
        options = out_nbrs[cur]
        if len(options) == 0:
            break
        if len(walk) == 1:
            nxt = options[rng.integers(len(options))]
        else:
            prev = walk[-2]
            weights = np.empty(len(options))
            for i, x in enumerate(options):
                if x == prev:
                    weights[i] = 1.0 / p
                elif x in nbr_sets[prev]:
                    weights[i] = 1.0
                else:
                    weights[i] = 1.0 / q
            weights /= weights.sum()
            nxt = options[rng.choice(len(options), p=weights)]
        walk.append(int(nxt))
    return walk


def train_skipgram(
    corpus: WalkCorpus, dim: int, window: int = 5, negatives_k: int = 5,
    epochs: int = 5, lr: float = 0.025, seed: int = 0,
) -> np.ndarray:
    """Skip-gram embeddings with negative sampling over a walk corpus.

    Maximizes log sigmoid(z_u . z_v) for pairs co-occurring within the
    window plus k sampled negatives with log sigmoid(-z_u . z_n);
    negatives are drawn proportional to degree^0.75. One gradient step
    per walk. Returns the |V| x dim embedding matrix.
    """
    embeddings, _ = run_skipgram(corpus, dim, window, negatives_k, epochs, lr, seed)
    return embeddings


def run_skipgram(
    corpus: WalkCorpus, dim: int, window: int = 5, negatives_k: int = 5,
    epochs: int = 5, lr: float = 0.025, seed: int = 0,
) -> tuple[np.ndarray, list[float]]:
    """train_skipgram plus the mean per-walk loss of each epoch."""
    if dim < 1 or window < 1:
        raise ConfigError("dim and window must be >= 1")
    if not corpus.walks or all(len(w) < 2 for w in corpus.walks):
        raise ConfigError("corpus has no co-occurring pairs to train on")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4B]))
    n = corpus.num_nodes
    weights = corpus.node_degrees**0.75
    if weights.sum() == 0:
        weights = np.ones(n)
    neg_dist = weights / weights.sum()

    z = Tensor(rng.normal(scale=0.1, size=(n, dim)), requires_grad=True)
    ones = Tensor(np.ones((dim, 1)))

    walk_pairs = []
    for walk in corpus.walks:
        pairs = [
            (walk[i], walk[j])
            for i in range(len(walk))
            for j in range(max(0, i - window), min(len(walk), i + window + 1))
            if i != j
        ]
        if pairs:
            walk_pairs.append(np.array(pairs, dtype=np.int64))

    width = 1 + negatives_k
    history = []
    for _ in range(epochs):
        epoch_losses = []
        for pairs in walk_pairs:
            m = len(pairs)
            centers = np.repeat(pairs[:, 0], width)
            contexts = np.empty((m, width), dtype=np.int64)
            contexts[:, 0] = pairs[:, 1]
            contexts[:, 1:] = rng.choice(n, size=(m, negatives_k), p=neg_dist)
            labels = np.zeros((m, width))
            labels[:, 0] = 1.0
            ad.zero_grad([z])
            with Tape() as tape:
                zu = ad.gather_rows(z, centers)
                zv = ad.gather_rows(z, contexts.reshape(-1))
                logits = ad.matmul(ad.mul(zu, zv), ones)
                step_loss = ad.cross_entropy_with_logits(logits, labels.reshape(-1))
                tape.backward(step_loss)
            ad.sgd_step([z], lr)
            epoch_losses.append(step_loss.item())
        history.append(float(np.mean(epoch_losses)))
    return z.data.copy(), history


def pool_graph_embedding(embeddings: np.ndarray, kind: str = "mean") -> np.ndarray:
    """Collapse a |V| x dim embedding matrix to one vector."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ConfigError("pooling needs a nonempty 2-D embedding matrix")
    if kind == "mean":
        return embeddings.mean(axis=0)
    if kind == "sum":
        return embeddings.sum(axis=0)
    raise ConfigError(f"unknown pooling kind {kind!r}")


def embeddings_to_csv(embeddings: np.ndarray) -> str:
    buf = io.StringIO()
    dim = embeddings.shape[1]
    buf.write("id," + ",".join(f"dim{j}" for j in range(dim)) + "\n")
    for i, row in enumerate(embeddings):
        buf.write(str(i) + "," + ",".join(repr(float(x)) for x in row) + "\n")
    return buf.getvalue()
