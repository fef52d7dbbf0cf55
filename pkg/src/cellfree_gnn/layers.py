"""Message-passing layers: mean-aggregation convolution (gcn), sampled
neighborhood aggregation with self-concatenation (sage), additive
single-head attention (gat), and the injective sum-MLP layer (gin).

Messages flow along edge direction: a node aggregates from its
in-neighbors, so undirected edges contribute both ways and a node with
only outgoing edges receives nothing. Empty neighborhoods aggregate to
the zero vector. Weight matrices are stored input-major, i.e. a layer
computes H @ W with W of shape (d_in, d_out).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .graph import Graph

FORMAT_VERSION = 1


@dataclass
class LayerSpec:
    kind: str                      # gcn | sage | gat | gin
    d_in: int
    d_out: int
    activation: str = "relu"
    aggregator: str = "mean"       # sage: mean | pool
    l2_normalize: bool = False     # sage
    leaky_slope: float = 0.2       # gat attention scores
    gin_eps: float = 0.0
    gin_hidden: int = 0            # 0 -> use d_out
    skip: str = "none"             # none | residual

    def __post_init__(self):
        if self.kind not in ("gcn", "sage", "gat", "gin"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.d_in < 1 or self.d_out < 1:
            raise ConfigError("layer dims must be positive")
        if self.aggregator not in ("mean", "pool"):
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if self.skip not in ("none", "residual"):
            raise ConfigError(f"unknown skip mode {self.skip!r}")
        if self.skip == "residual" and self.d_in != self.d_out:
            raise ConfigError("residual skip requires d_in == d_out")


def glorot(rng, rows, cols) -> Tensor:
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_layer_params(spec: LayerSpec, rng) -> dict[str, Tensor]:
    if spec.kind == "gcn":
        return {"W": glorot(rng, spec.d_in, spec.d_out)}
    if spec.kind == "sage":
        params = {"W": glorot(rng, 2 * spec.d_in, spec.d_out)}
        if spec.aggregator == "pool":
            params["W_pool"] = glorot(rng, spec.d_in, spec.d_in)
        return params
    if spec.kind == "gat":
        return {
            "W": glorot(rng, spec.d_in, spec.d_out),
            "a_dst": glorot(rng, spec.d_out, 1),
            "a_src": glorot(rng, spec.d_out, 1),
        }
    hidden = spec.gin_hidden or spec.d_out
    return {
        "W1": glorot(rng, spec.d_in, hidden),
        "b1": Tensor(np.zeros((1, hidden)), requires_grad=True),
        "W2": glorot(rng, hidden, spec.d_out),
        "b2": Tensor(np.zeros((1, spec.d_out)), requires_grad=True),
    }


def gcn_forward(g: Graph, h: Tensor, w: Tensor, act: str = "relu") -> Tensor:
    """h_v = act(mean over in-neighbors u of W-transformed h_u)."""
    if h.shape != (g.num_nodes, w.shape[0]):
        raise ShapeError(f"features {h.shape} do not match {g.num_nodes} x {w.shape[0]}")
    src, dst = g.message_edges()
    msgs = ad.matmul(ad.gather_rows(h, src), w)
    agg = ad.segment_reduce(msgs, dst, g.num_nodes, "mean")
    return ad.activation(agg, act)


def sage_forward(
    g: Graph, h: Tensor, params: dict, act: str = "relu",
    aggregator: str = "mean", l2_normalize: bool = False,
) -> Tensor:
    """h_v = act(W [h_v || AGG of in-neighbor h_u]), optional row l2 norm.

    AGG is a plain mean, or "pool": elementwise max of relu(h_u @ W_pool).
    """
    w = params["W"]
    if w.shape[0] != 2 * h.shape[1]:
        raise ShapeError(f"sage W expects {2 * h.shape[1]} input columns, has {w.shape[0]}")
    src, dst = g.message_edges()
    nbr = ad.gather_rows(h, src)
    if aggregator == "pool":
        nbr = ad.activation(ad.matmul(nbr, params["W_pool"]), "relu")
        agg = ad.segment_reduce(nbr, dst, g.num_nodes, "max")
    else:
        agg = ad.segment_reduce(nbr, dst, g.num_nodes, "mean")
    out = ad.activation(ad.matmul(ad.concat_cols(h, agg), w), act)
    if l2_normalize:
        out = ad.l2_normalize_rows(out)
    return out


def gat_forward(
    g: Graph, h: Tensor, params: dict, act: str = "relu", leaky_slope: float = 0.2,
) -> Tensor:
    """Attention-weighted aggregation.

    Edge score e_vu = leaky_relu(a_dst . Wh_v + a_src . Wh_u) is
    softmax-normalized over each target's in-neighborhood, then
    h_v = act(sum_u alpha_vu Wh_u).
    """
    wh = ad.matmul(h, params["W"])
    d_out = wh.shape[1]
    src, dst = g.message_edges()
    scores = ad.add(
        ad.gather_rows(ad.matmul(wh, params["a_dst"]), dst),
        ad.gather_rows(ad.matmul(wh, params["a_src"]), src),
    )
    e = ad.activation(scores, "leaky_relu", slope=leaky_slope)
    alpha = ad.segment_softmax(e, dst, g.num_nodes)
    spread = ad.matmul(alpha, Tensor(np.ones((1, d_out))))
    weighted = ad.mul(ad.gather_rows(wh, src), spread)
    agg = ad.segment_reduce(weighted, dst, g.num_nodes, "sum")
    return ad.activation(agg, act)


def gin_forward(g: Graph, h: Tensor, params: dict, eps: float = 0.0) -> Tensor:
    """h_v = MLP((1 + eps) h_v + sum of in-neighbor h_u); 2-layer relu MLP."""
    src, dst = g.message_edges()
    agg = ad.segment_reduce(ad.gather_rows(h, src), dst, g.num_nodes, "sum")
    combined = ad.add(ad.scale(h, 1.0 + eps), agg)
    hidden = ad.activation(
        ad.add_row_bias(ad.matmul(combined, params["W1"]), params["b1"]), "relu"
    )
    return ad.add_row_bias(ad.matmul(hidden, params["W2"]), params["b2"])


def layer_forward(g: Graph, h: Tensor, spec: LayerSpec, params: dict) -> Tensor:
    if spec.kind == "gcn":
        out = gcn_forward(g, h, params["W"], spec.activation)
    elif spec.kind == "sage":
        out = sage_forward(g, h, params, spec.activation, spec.aggregator, spec.l2_normalize)
    elif spec.kind == "gat":
        out = gat_forward(g, h, params, spec.activation, spec.leaky_slope)
    else:
        out = gin_forward(g, h, params, spec.gin_eps)
    if spec.skip == "residual":
        out = ad.add(out, h)
    return out


@dataclass
class GnnModel:
    """An ordered layer stack; layer L sees the (L-1)-hop embeddings."""

    specs: list[LayerSpec]
    params: list[dict[str, Tensor]] = field(repr=False)

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.params for t in layer.values()]

    def out_dim(self, input_dim: int) -> int:
        return self.specs[-1].d_out if self.specs else input_dim


def build_model(specs: list[LayerSpec], seed: int = 0) -> GnnModel:
    for a, b in zip(specs, specs[1:]):
        if a.d_out != b.d_in:
            raise ConfigError(f"layer dims do not chain: {a.d_out} -> {b.d_in}")
    seq = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in seq.spawn(max(len(specs), 1))]
    params = [init_layer_params(spec, rng) for spec, rng in zip(specs, rngs)]
    return GnnModel(list(specs), params)


def model_forward(model: GnnModel, g: Graph, h0: Tensor | None = None) -> Tensor:
    """Apply the stack to the graph's features (or h0); no layers -> input."""
    h = h0 if h0 is not None else Tensor(g.node_features)
    if model.specs and h.shape[1] != model.specs[0].d_in:
        raise ShapeError(
            f"feature dim {h.shape[1]} does not match first layer d_in "
            f"{model.specs[0].d_in}"
        )
    for spec, params in zip(model.specs, model.params):
        h = layer_forward(g, h, spec, params)
    return h


def oversmoothing_metric(h: np.ndarray) -> float:
    """Mean pairwise distance between l2-normalized embedding rows.

    Approaches 0 as rows collapse onto one direction.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] < 2:
        raise ShapeError("need at least 2 rows")
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    unit = h / np.where(norms <= 1e-12, 1.0, norms)
    gram = unit @ unit.T
    sq = np.maximum(np.diag(gram)[:, None] + np.diag(gram)[None, :] - 2 * gram, 0.0)
    iu = np.triu_indices(h.shape[0], k=1)
    return float(np.sqrt(sq[iu]).mean())


# ---------------------------------------------------------------------------
# model (de)serialization

def _spec_to_doc(spec: LayerSpec) -> dict:
    return {
        "kind": spec.kind, "d_in": spec.d_in, "d_out": spec.d_out,
        "activation": spec.activation, "aggregator": spec.aggregator,
        "l2_normalize": spec.l2_normalize, "leaky_slope": spec.leaky_slope,
        "gin_eps": spec.gin_eps, "gin_hidden": spec.gin_hidden, "skip": spec.skip,
    }


def params_to_doc(params: dict[str, Tensor]) -> dict:
    return {
        name: {"shape": list(t.shape), "values": [float(x) for x in t.data.reshape(-1)]}
        for name, t in params.items()
    }


def params_from_doc(doc: dict) -> dict[str, Tensor]:
    out = {}
    for name, entry in doc.items():
        shape = tuple(entry["shape"])
        values = np.array(entry["values"], dtype=np.float64).reshape(shape)
        out[name] = Tensor(values, requires_grad=True)
    return out


def model_to_json(model: GnnModel) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "layers": [
            {"spec": _spec_to_doc(spec), "params": params_to_doc(params)}
            for spec, params in zip(model.specs, model.params)
        ],
    }
    return json.dumps(doc)


def model_from_json(text: str) -> GnnModel:
    doc = json.loads(text)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported model format_version {doc.get('format_version')!r}")
    specs, params = [], []
    for layer in doc["layers"]:
        specs.append(LayerSpec(**layer["spec"]))
        params.append(params_from_doc(layer["params"]))
    return GnnModel(specs, params)
