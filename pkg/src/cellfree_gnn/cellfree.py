"""Cell-free massive MIMO scenario generator and AP-selection pipeline.

A scenario places access points (grid or uniform) and user terminals in
a square service area, draws log-distance path loss with log-normal
shadowing per link, and derives RSRP. Each UE yields a small labeled
graph: AP nodes joined by a k-nearest-neighbor geometry graph, plus
directed edges from the measured APs into the UE node, so AP embeddings
never depend on UE state. Labels mark the top-m_candidate and
top-m_serve APs by true channel gain.

Selection runs in two stages: a node head proposes candidate APs, an
edge head scores (UE, AP) links among the proposed candidates.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .embeddings import random_walks, train_skipgram
from .errors import ConfigError
from .graph import Graph, build_graph, deserialize_graph, serialize_graph
from .layers import LayerSpec, build_model, model_forward
from .metrics import MetricsReport, best_f1, classification_metrics, pr_curve
from .training import TaskData, build_head, make_split, merge_task_data, predict_scores, train

logger = logging.getLogger(__name__)


@dataclass
class ScenarioConfig:
    num_aps: int = 25
    area_side_m: float = 500.0
    ap_layout: str = "grid"            # grid | uniform
    num_ues: int = 100
    tx_power_dbm: float = 30.0
    pathloss_exponent: float = 3.67
    pathloss_ref_db: float = 30.5      # dB at the 1 m reference distance
    shadowing_sigma_db: float = 8.0
    detection_threshold_dbm: float = -110.0
    n_meas: int = 5
    m_serve: int = 4
    m_candidate: int = 8
    k_ap_knn: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.num_aps, self.num_ues, self.n_meas, self.m_serve,
               self.m_candidate, self.k_ap_knn) < 1:
            raise ConfigError("all scenario counts must be positive")
        if self.area_side_m <= 0:
            raise ConfigError("area_side_m must be positive")
        if not (self.m_serve <= self.m_candidate <= self.num_aps):
            raise ConfigError("need m_serve <= m_candidate <= num_aps")
        if self.n_meas > self.num_aps:
            raise ConfigError("n_meas cannot exceed num_aps")
        if self.ap_layout not in ("grid", "uniform"):
            raise ConfigError(f"unknown ap_layout {self.ap_layout!r}")
        if self.shadowing_sigma_db < 0:
            raise ConfigError("shadowing_sigma_db must be >= 0")
        if self.k_ap_knn >= self.num_aps:
            raise ConfigError("k_ap_knn must be below num_aps")


@dataclass
class Scenario:
    config: ScenarioConfig
    ap_positions: np.ndarray   # (L, 2) meters
    ue_positions: np.ndarray   # (K, 2) meters
    gain_db: np.ndarray        # (K, L) large-scale channel gain
    rsrp_dbm: np.ndarray       # (K, L) = tx_power + gain


def large_scale_gain(d_m, config: ScenarioConfig, shadow_sample_db=0.0):
    """Log-distance gain in dB: -(PL0 + 10 n log10(max(d, 1 m))) - shadow."""
    d = np.maximum(np.asarray(d_m, dtype=np.float64), 1.0)
    pl = config.pathloss_ref_db + 10.0 * config.pathloss_exponent * np.log10(d)
    return -pl - shadow_sample_db


def generate_scenario(config: ScenarioConfig) -> Scenario:
    """Place APs and UEs and populate per-link gains and RSRP.

    Grid layout requires a square num_aps: sqrt(L) x sqrt(L) lattice with
    spacing side/sqrt(L), first AP at half a spacing from the corner.
    Each UE draws its position and its shadowing row from a sub-seed
    derived from (seed, ue index), so the scenario is reproducible and
    UEs can be generated in any order.
    """
    cfg = config
    if cfg.ap_layout == "grid":
        m = round(np.sqrt(cfg.num_aps))
        if m * m != cfg.num_aps:
            raise ConfigError(
                f"grid layout requires a square num_aps, got {cfg.num_aps}"
            )
        spacing = cfg.area_side_m / m
        ap_positions = np.array(
            [((k % m + 0.5) * spacing, (k // m + 0.5) * spacing) for k in range(cfg.num_aps)]
        )
    else:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA9]))
        ap_positions = rng.uniform(0.0, cfg.area_side_m, size=(cfg.num_aps, 2))

    ue_positions = np.empty((cfg.num_ues, 2))
    gain_db = np.empty((cfg.num_ues, cfg.num_aps))
    for ue in range(cfg.num_ues):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0E, ue]))
        ue_positions[ue] = rng.uniform(0.0, cfg.area_side_m, size=2)
        shadow = rng.normal(0.0, cfg.shadowing_sigma_db, size=cfg.num_aps)
        dists = np.linalg.norm(ap_positions - ue_positions[ue], axis=1)
        gain_db[ue] = large_scale_gain(dists, cfg, shadow)
    rsrp_dbm = cfg.tx_power_dbm + gain_db
    return Scenario(cfg, ap_positions, ue_positions, gain_db, rsrp_dbm)


def measure(scenario: Scenario, ue: int, config: ScenarioConfig | None = None) -> np.ndarray:
    """Measured AP ids for a UE: detectable RSRP, n_meas strongest.

    Ties broken toward the lower AP id; result sorted ascending. May be
    empty when every AP is below the detection threshold.
    """
    cfg = config or scenario.config
    rsrp = scenario.rsrp_dbm[ue]
    detectable = np.nonzero(rsrp >= cfg.detection_threshold_dbm)[0]
    if detectable.size == 0:
        return detectable
    order = detectable[np.lexsort((detectable, -rsrp[detectable]))]
    return np.sort(order[:cfg.n_meas])


def ground_truth(scenario: Scenario, ue: int, config: ScenarioConfig | None = None):
    """(candidate ids, serving ids): top-m by true gain, low id on ties."""
    cfg = config or scenario.config
    gain = scenario.gain_db[ue]
    ids = np.arange(cfg.num_aps)
    order = ids[np.lexsort((ids, -gain))]
    candidate = np.sort(order[:cfg.m_candidate])
    serving = np.sort(order[:cfg.m_serve])
    return candidate, serving


def ap_knn_edges(ap_positions: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Symmetrized k-nearest-neighbor pairs among APs (undirected)."""
    n = len(ap_positions)
    pairs = set()
    for i in range(n):
        d = np.linalg.norm(ap_positions - ap_positions[i], axis=1)
        d[i] = np.inf
        ids = np.arange(n)
        nearest = ids[np.lexsort((ids, d))][:k]
        for j in nearest:
            pairs.add((min(i, int(j)), max(i, int(j))))
    return sorted(pairs)


@dataclass
class InstanceGraph:
    """Per-UE labeled graph: AP nodes 0..L-1 plus the UE node L."""

    graph: Graph
    ue_node_id: int
    measured_set: np.ndarray
    stage1_labels: np.ndarray   # candidate flag per AP
    stage2_labels: np.ndarray   # serving flag per AP
    degenerate: bool = False
    ue_index: int = -1          # scenario UE this instance came from


def build_instance_graph(
    scenario: Scenario, ue: int, config: ScenarioConfig | None = None,
    knn_pairs: list | None = None,
) -> InstanceGraph:
    """Assemble the labeled selection graph for one UE.

    AP features are [x/side, y/side, normalized RSRP (0 if unmeasured),
    measured flag]; the UE row is all zeros. AP-AP edges are the shared
    geometry kNN graph; each measured AP gets one directed edge into the
    UE node, which therefore has no outgoing edges at all.
    """
    cfg = config or scenario.config
    side = cfg.area_side_m
    L = cfg.num_aps
    measured = measure(scenario, ue, cfg)
    candidate, serving = ground_truth(scenario, ue, cfg)

    feats = np.zeros((L + 1, 4))
    feats[:L, 0] = scenario.ap_positions[:, 0] / side
    feats[:L, 1] = scenario.ap_positions[:, 1] / side
    rsrp_norm = np.clip((scenario.rsrp_dbm[ue] + 110.0) / 60.0, -1.0, 2.0)
    feats[measured, 2] = rsrp_norm[measured]
    feats[measured, 3] = 1.0

    if knn_pairs is None:
        knn_pairs = ap_knn_edges(scenario.ap_positions, cfg.k_ap_knn)
    edges = [(a, b, False) for a, b in knn_pairs]
    edges += [(int(ap), L, True) for ap in measured]

    stage1 = np.zeros(L, dtype=np.int64)
    stage1[candidate] = 1
    stage2 = np.zeros(L, dtype=np.int64)
    stage2[serving] = 1
    return InstanceGraph(
        graph=build_graph(L + 1, edges, feats),
        ue_node_id=L,
        measured_set=measured,
        stage1_labels=stage1,
        stage2_labels=stage2,
        degenerate=measured.size == 0,
        ue_index=ue,
    )


def build_dataset(scenario: Scenario) -> tuple[list[InstanceGraph], int]:
    """Instance graphs for every UE, excluding degenerate ones.

    Returns (instances, number dropped). A UE with no measurable AP has
    no information path into its node, so it cannot be trained or scored.
    """
    cfg = scenario.config
    knn_pairs = ap_knn_edges(scenario.ap_positions, cfg.k_ap_knn)
    instances, dropped = [], 0
    for ue in range(cfg.num_ues):
        inst = build_instance_graph(scenario, ue, cfg, knn_pairs)
        if inst.degenerate:
            dropped += 1
        else:
            instances.append(inst)
    if dropped:
        logger.info("dropped %d degenerate UE instances (no measurable AP)", dropped)
    return instances, dropped


# ---------------------------------------------------------------------------
# instance / scenario serialization

def instance_to_json(inst: InstanceGraph) -> str:
    doc = json.loads(serialize_graph(inst.graph))
    doc["ue_node_id"] = inst.ue_node_id
    doc["measured_set"] = [int(x) for x in inst.measured_set]
    doc["stage1_labels"] = [int(x) for x in inst.stage1_labels]
    doc["stage2_labels"] = [int(x) for x in inst.stage2_labels]
    return json.dumps(doc)


def instance_from_json(text: str) -> InstanceGraph:
    doc = json.loads(text)
    graph = deserialize_graph(json.dumps(doc))
    measured = np.array(doc["measured_set"], dtype=np.int64)
    return InstanceGraph(
        graph=graph,
        ue_node_id=int(doc["ue_node_id"]),
        measured_set=measured,
        stage1_labels=np.array(doc["stage1_labels"], dtype=np.int64),
        stage2_labels=np.array(doc["stage2_labels"], dtype=np.int64),
        degenerate=measured.size == 0,
    )


def dataset_to_jsonl(instances: list[InstanceGraph]) -> str:
    return "".join(instance_to_json(inst) + "\n" for inst in instances)


def dataset_from_jsonl(text: str) -> list[InstanceGraph]:
    return [instance_from_json(line) for line in text.splitlines() if line.strip()]


def scenario_to_json(s: Scenario) -> str:
    return json.dumps({
        "config": asdict(s.config),
        "ap_positions": s.ap_positions.tolist(),
        "ue_positions": s.ue_positions.tolist(),
        "gain_db": s.gain_db.tolist(),
        "rsrp_dbm": s.rsrp_dbm.tolist(),
    })


# ---------------------------------------------------------------------------
# the two-stage selection pipeline

@dataclass
class ModelConfig:
    layer_kind: str = "sage"
    hidden_dims: tuple = (16, 16)
    activation: str = "relu"
    aggregator: str = "mean"
    l2_normalize: bool = True
    head_hidden: int = 16

    def layer_specs(self, d_in: int) -> list[LayerSpec]:
        dims = [d_in] + list(self.hidden_dims)
        specs = []
        for a, b in zip(dims, dims[1:]):
            specs.append(LayerSpec(
                self.layer_kind, a, b, activation=self.activation,
                aggregator=self.aggregator, l2_normalize=self.l2_normalize,
            ))
        return specs


@dataclass
class TrainConfig:
    train_ues: int = 2000
    val_ues: int = 200
    test_ues: int = 500
    epochs: int = 80
    lr: float = 0.02
    optimizer: str = "adam"
    patience: int = 12
    shallow_dim: int = 8
    shallow_walk_length: int = 6
    shallow_walks_per_node: int = 2
    shallow_window: int = 2
    shallow_negatives: int = 2
    shallow_epochs: int = 2
    shallow_lr: float = 0.05

    @property
    def total_ues(self) -> int:
        return self.train_ues + self.val_ues + self.test_ues


@dataclass
class SelectionResult:
    gnn: MetricsReport
    gnn_curve: list
    gnn_best_f1: float
    stage1_candidate_recall: float
    baseline_nearest_curve: list
    baseline_nearest_best_f1: float
    baseline_shallow_curve: list
    baseline_shallow_best_f1: float
    dropped_instances: int
    stage1_history: list = field(default_factory=list)
    stage2_history: list = field(default_factory=list)


def _stage1_task(instances):
    items = [
        TaskData(inst.graph, np.arange(len(inst.stage1_labels)), inst.stage1_labels)
        for inst in instances
    ]
    return merge_task_data(items)


def _stage2_task(instances):
    items = []
    for inst in instances:
        n_ap = len(inst.stage2_labels)
        pairs = np.stack(
            [np.full(n_ap, inst.ue_node_id), np.arange(n_ap)], axis=1
        )
        items.append(TaskData(inst.graph, pairs, inst.stage2_labels))
    return merge_task_data(items)


def run_ap_selection(
    scenario_cfg: ScenarioConfig,
    model_cfg: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
) -> SelectionResult:
    """Full experiment: generate, split, train both stages, evaluate.

    Evaluation pools test (UE, AP) pairs. Stage 1 proposes the
    m_candidate top-scoring APs per UE; stage 2 scores links only for
    those, and every true serving pair missed by stage 1 counts as a
    miss at every threshold, so stage-2 recall is bounded by stage-1
    candidate recall. Two score baselines run on the same test UEs:
    negative UE-AP distance, and a per-instance dot-product decoder on
    structure-only random-walk embeddings (z-scored within instance to
    make thresholds comparable across instances).
    """
    model_cfg = model_cfg or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    cfg = replace(scenario_cfg, num_ues=train_cfg.total_ues)
    scenario = generate_scenario(cfg)
    instances, dropped = build_dataset(scenario)

    ratios = (
        train_cfg.train_ues / train_cfg.total_ues,
        train_cfg.val_ues / train_cfg.total_ues,
        train_cfg.test_ues / train_cfg.total_ues,
    )
    split = make_split(len(instances), "inductive", ratios, seed=cfg.seed)
    parts = {
        name: [instances[i] for i in idx]
        for name, idx in (("train", split.train), ("val", split.val), ("test", split.test))
    }

    d_in = instances[0].graph.feature_dim
    # stage 1: which APs are worth considering for this UE
    model1 = build_model(model_cfg.layer_specs(d_in), seed=cfg.seed + 1)
    head1 = build_head("node", model1.out_dim(d_in), classes=1, seed=cfg.seed + 2)
    res1 = train(
        model1, head1, _stage1_task(parts["train"]), _stage1_task(parts["val"]),
        epochs=train_cfg.epochs, lr=train_cfg.lr, optimizer=train_cfg.optimizer,
        patience=train_cfg.patience,
    )
    # stage 2: link scores for (UE, AP) pairs
    model2 = build_model(model_cfg.layer_specs(d_in), seed=cfg.seed + 3)
    head2 = build_head(
        "edge", model2.out_dim(d_in), hidden=model_cfg.head_hidden, seed=cfg.seed + 4
    )
    res2 = train(
        model2, head2, _stage2_task(parts["train"]), _stage2_task(parts["val"]),
        epochs=train_cfg.epochs, lr=train_cfg.lr, optimizer=train_cfg.optimizer,
        patience=train_cfg.patience,
    )

    test = parts["test"]
    n_ap = cfg.num_aps
    total_positives = int(sum(inst.stage2_labels.sum() for inst in test))

    # stage-1 proposals per test instance
    stage1_scores = predict_scores(model1, head1, _stage1_task(test))[:, 0]
    stage1_scores = stage1_scores.reshape(len(test), n_ap)
    ids = np.arange(n_ap)
    proposed = [
        np.sort(ids[np.lexsort((ids, -row))][:cfg.m_candidate]) for row in stage1_scores
    ]
    hit = sum(
        int(np.intersect1d(np.nonzero(inst.stage2_labels)[0], cand).size)
        for inst, cand in zip(test, proposed)
    )
    stage1_recall = hit / total_positives

    # stage-2 scores restricted to the proposals
    pair_items = [
        TaskData(
            inst.graph,
            np.stack([np.full(len(cand), inst.ue_node_id), cand], axis=1),
            inst.stage2_labels[cand],
        )
        for inst, cand in zip(test, proposed)
    ]
    merged_pairs = merge_task_data(pair_items)
    link_scores = predict_scores(model2, head2, merged_pairs)[:, 0]
    link_labels = merged_pairs.labels
    gnn_curve = pr_curve(link_scores, link_labels, total_positives=total_positives)
    gnn_report = classification_metrics(link_scores, link_labels, threshold=0.0)
    gnn_report.pr_curve = gnn_curve

    near_scores, near_labels = _nearest_baseline(scenario, test)
    nearest_curve = pr_curve(near_scores, near_labels, total_positives=total_positives)

    shallow_scores, shallow_labels = _shallow_baseline(test, train_cfg, cfg.seed)
    shallow_curve = pr_curve(shallow_scores, shallow_labels, total_positives=total_positives)

    return SelectionResult(
        gnn=gnn_report,
        gnn_curve=gnn_curve,
        gnn_best_f1=best_f1(gnn_curve),
        stage1_candidate_recall=stage1_recall,
        baseline_nearest_curve=nearest_curve,
        baseline_nearest_best_f1=best_f1(nearest_curve),
        baseline_shallow_curve=shallow_curve,
        baseline_shallow_best_f1=best_f1(shallow_curve),
        dropped_instances=dropped,
        stage1_history=res1.history,
        stage2_history=res2.history,
    )


def _nearest_baseline(scenario: Scenario, test: list[InstanceGraph]):
    """Score every (UE, AP) pair by negative distance."""
    scores, labels = [], []
    for inst in test:
        ue_pos = scenario.ue_positions[inst.ue_index]
        d = np.linalg.norm(scenario.ap_positions - ue_pos, axis=1)
        scores.append(-d)
        labels.append(inst.stage2_labels)
    return np.concatenate(scores), np.concatenate(labels)


def _shallow_baseline(test: list[InstanceGraph], train_cfg: TrainConfig, seed: int):
    """Dot-product link decoder on per-instance random-walk embeddings.

    Shallow embeddings are retrained per graph (they do not transfer
    across instances) and see only structure, not the RSRP features.
    Scores are z-scored within each instance before pooling so one
    global threshold sweep is meaningful.
    """
    scores, labels = [], []
    for k, inst in enumerate(test):
        corpus = random_walks(
            inst.graph, train_cfg.shallow_walk_length, train_cfg.shallow_walks_per_node,
            seed=seed + 17 * k + 5,
        )
        z = train_skipgram(
            corpus, dim=train_cfg.shallow_dim, window=train_cfg.shallow_window,
            negatives_k=train_cfg.shallow_negatives, epochs=train_cfg.shallow_epochs,
            lr=train_cfg.shallow_lr, seed=seed + 17 * k + 6,
        )
        dots = z[:len(inst.stage2_labels)] @ z[inst.ue_node_id]
        std = dots.std()
        scores.append((dots - dots.mean()) / (std if std > 1e-12 else 1.0))
        labels.append(inst.stage2_labels)
    return np.concatenate(scores), np.concatenate(labels)
