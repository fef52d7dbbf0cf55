"""Prediction heads, dataset splits, and the supervised training loop.

Training is full batch: inductive tasks merge their instance graphs
into one disjoint union per partition, so a step is a single forward /
backward pass. Validation loss drives early stopping and best-parameter
restore; the test partition is never touched here.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ShapeError, TrainingError
from .graph import Graph, merge_graphs
from .layers import GnnModel, glorot, model_forward, params_from_doc, params_to_doc


@dataclass
class Head:
    """Maps node embeddings to logits for a node, edge, or graph task.

    node: linear d -> classes on queried node ids (1 column = binary).
    edge: 2-layer feedforward on [h_u || h_v] -> one logit per pair.
    graph: mean-pool over each queried node group, then linear.
    """

    level: str
    params: dict[str, Tensor] = field(repr=False)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())


def build_head(level: str, d_in: int, classes: int = 1, hidden: int = 0, seed: int = 0) -> Head:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4EAD]))
    if level == "node" or level == "graph":
        params = {
            "W": glorot(rng, d_in, classes),
            "b": Tensor(np.zeros((1, classes)), requires_grad=True),
        }
    elif level == "edge":
        hidden = hidden or d_in
        params = {
            "W1": glorot(rng, 2 * d_in, hidden),
            "b1": Tensor(np.zeros((1, hidden)), requires_grad=True),
            "W2": glorot(rng, hidden, 1),
            "b2": Tensor(np.zeros((1, 1)), requires_grad=True),
        }
    else:
        raise ConfigError(f"unknown head level {level!r}")
    return Head(level, params)


def apply_head(head: Head, embeddings: Tensor, query) -> Tensor:
    """Logits for the query: node ids, (u, v) pairs, or node groups.

    Edge queries are ordered: (u, v) and (v, u) generally score
    differently since the two slots are distinct feedforward inputs.
    """
    if head.level == "node":
        ids = np.asarray(query, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError("node head query must be a flat id list")
        h = ad.gather_rows(embeddings, ids)
        return ad.add_row_bias(ad.matmul(h, head.params["W"]), head.params["b"])
    if head.level == "edge":
        pairs = np.asarray(query, dtype=np.int64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ShapeError("edge head query must be (k, 2) node pairs")
        hu = ad.gather_rows(embeddings, pairs[:, 0])
        hv = ad.gather_rows(embeddings, pairs[:, 1])
        hidden = ad.activation(
            ad.add_row_bias(
                ad.matmul(ad.concat_cols(hu, hv), head.params["W1"]), head.params["b1"]
            ),
            "relu",
        )
        return ad.add_row_bias(ad.matmul(hidden, head.params["W2"]), head.params["b2"])
    if head.level == "graph":
        segments = np.asarray(query, dtype=np.int64)
        if segments.shape != (embeddings.shape[0],):
            raise ShapeError("graph head query must assign a group to every node")
        pooled = ad.segment_reduce(embeddings, segments, int(segments.max()) + 1, "mean")
        return ad.add_row_bias(ad.matmul(pooled, head.params["W"]), head.params["b"])
    raise ConfigError(f"unknown head level {head.level!r}")


def head_to_doc(head: Head) -> dict:
    return {"level": head.level, "params": params_to_doc(head.params)}


def head_from_doc(doc: dict) -> Head:
    return Head(doc["level"], params_from_doc(doc["params"]))


# ---------------------------------------------------------------------------
# splits

@dataclass
class Split:
    mode: str  # transductive | inductive
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def masks(self, n: int):
        """Boolean train/val/test masks over n entities."""
        out = []
        for idx in (self.train, self.val, self.test):
            m = np.zeros(n, dtype=bool)
            m[idx] = True
            out.append(m)
        return tuple(out)


def make_split(n: int, mode: str, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Split:
    """Seeded random partition of n entities (transductive: labeled nodes
    of one graph; inductive: whole instance graphs, which keeps test
    nodes out of every training forward pass)."""
    if mode not in ("transductive", "inductive"):
        raise ConfigError(f"unknown split mode {mode!r}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("ratios must be three positive numbers summing to 1")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x59717])).permutation(n)
    bound1 = round(ratios[0] * n)
    bound2 = round((ratios[0] + ratios[1]) * n)
    parts = (order[:bound1], order[bound1:bound2], order[bound2:])
    if any(len(p) == 0 for p in parts):
        raise ConfigError(f"split of {n} entities with ratios {ratios} leaves a part empty")
    return Split(mode, *(np.sort(p) for p in parts))


# ---------------------------------------------------------------------------
# labeled tasks

@dataclass
class TaskData:
    """One graph plus a labeled query batch at some head level."""

    graph: Graph
    query: np.ndarray
    labels: np.ndarray


def merge_task_data(items: list[TaskData]) -> TaskData:
    """Disjoint-union a list of single-graph tasks into one batch task."""
    if not items:
        raise ConfigError("cannot merge an empty task list")
    merged, offsets = merge_graphs([t.graph for t in items])
    queries, labels = [], []
    for off, t in zip(offsets, items):
        q = np.asarray(t.query, dtype=np.int64)
        queries.append(q + int(off))
        labels.append(np.asarray(t.labels))
    return TaskData(merged, np.concatenate(queries), np.concatenate(labels))


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def _loss_on(model, head, task: TaskData, loss_kind: str) -> Tensor:
    h = model_forward(model, task.graph)
    logits = apply_head(head, h, task.query)
    return ad.loss(loss_kind, logits, task.labels)


def _snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snapshot):
    for p, data in zip(params, snapshot):
        p.data = data.copy()


def train(
    model: GnnModel,
    head: Head,
    train_task: TaskData,
    val_task: TaskData | None,
    *,
    epochs: int,
    lr: float = 0.01,
    optimizer: str = "adam",
    loss_kind: str = "cross_entropy_with_logits",
    patience: int = 0,
) -> TrainResult:
    """Full-batch training with val-loss early stopping.

    patience = 0 disables early stopping; either way the parameters left
    on the model are the ones with the best observed validation loss
    (training loss when no validation task is given). epochs = 0 returns
    the initial parameters untouched.
    """
    params = model.parameters() + head.parameters()
    history: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_params = _snapshot(params)
    since_best = 0
    for epoch in range(epochs):
        ad.zero_grad(params)
        with Tape() as tape:
            loss_t = _loss_on(model, head, train_task, loss_kind)
            train_loss = loss_t.item()
            if not np.isfinite(train_loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}: {train_loss}"
                )
            tape.backward(loss_t)
        if optimizer == "adam":
            ad.adam_step(params, lr, t=epoch + 1)
        elif optimizer == "sgd":
            ad.sgd_step(params, lr)
        else:
            raise ConfigError(f"unknown optimizer {optimizer!r}")

        if val_task is not None:
            val_loss = _loss_on(model, head, val_task, loss_kind).item()
        else:
            val_loss = train_loss
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = _snapshot(params)
            since_best = 0
        else:
            since_best += 1
            if patience and since_best >= patience:
                break
    _restore(params, best_params)
    return TrainResult(history, best_epoch, float(best_val) if history else np.inf)


def predict_scores(model: GnnModel, head: Head, task: TaskData) -> np.ndarray:
    """Forward pass without recording; returns the logit column(s)."""
    h = model_forward(model, task.graph)
    return apply_head(head, h, task.query).data


def history_to_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    buf.write("epoch,train_loss,val_loss\n")
    for row in history:
        buf.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r}\n")
    return buf.getvalue()
