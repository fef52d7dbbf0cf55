import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from cellfree_gnn import autodiff as ad
from cellfree_gnn.autodiff import Tensor
from cellfree_gnn.errors import ConfigError, ShapeError, TrainingError
from cellfree_gnn.graph import build_graph
from cellfree_gnn.layers import LayerSpec, build_model
from cellfree_gnn.metrics import (
    best_f1,
    classification_metrics,
    metrics_to_csv,
    pr_curve,
    pr_curve_to_csv,
    rmse,
    roc_auc,
)
from cellfree_gnn.training import (
    Head,
    TaskData,
    apply_head,
    build_head,
    head_from_doc,
    head_to_doc,
    history_to_csv,
    make_split,
    merge_task_data,
    predict_scores,
    train,
)


class TestMetrics:
    def test_indicator_sets(self):
        # predicted {1,2,3} vs true {2,3,4} over 6 items
        scores = np.array([0, 1, 1, 1, 0, 0], dtype=float)
        labels = np.array([0, 0, 1, 1, 1, 0])
        report = classification_metrics(scores, labels, threshold=0.5)
        assert report.precision == pytest.approx(2 / 3)
        assert report.recall == pytest.approx(2 / 3)

    def test_perfect_auc(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties_auc_half(self):
        assert roc_auc([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]) == 0.5

    def test_auc_matches_sklearn(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = int(rng.integers(5, 60))
            scores = np.round(rng.normal(size=n), 1)  # force ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                continue
            assert roc_auc(scores, labels) == pytest.approx(
                roc_auc_score(labels, scores), abs=1e-12
            )

    def test_precision_convention_zero_predicted(self):
        report = classification_metrics([0.0, 0.0], [0, 0], threshold=1.0)
        assert report.precision == 1.0 and not np.isnan(report.recall)
        assert report.degenerate_precision
        report = classification_metrics([0.0, 0.0], [1, 0], threshold=1.0)
        assert report.precision == 0.0
        assert report.degenerate_precision

    def test_accuracy_error_complement(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=40)
        labels = rng.integers(0, 2, size=40)
        report = classification_metrics(scores, labels)
        assert report.accuracy + report.error_rate == pytest.approx(1.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[0] = 1
        base = classification_metrics(scores, labels)
        perm = rng.permutation(30)
        shuffled = classification_metrics(scores[perm], labels[perm])
        assert base.rows() == shuffled.rows()

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            classification_metrics([0.1], [1, 0])

    def test_rmse(self):
        x = np.array([1.0, 2.0, 3.0])
        assert rmse(x, x) == 0.0
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))


class TestPrCurve:
    def test_perfect_separation_contains_ideal_point(self):
        curve = pr_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert any(p == 1.0 and r == 1.0 for _, p, r in curve)

    def test_thresholds_strictly_decreasing(self):
        rng = np.random.default_rng(3)
        scores = np.round(rng.normal(size=50), 1)
        labels = rng.integers(0, 2, size=50)
        labels[0] = 1
        ts = [t for t, _, _ in pr_curve(scores, labels)]
        assert all(a > b for a, b in zip(ts, ts[1:]))

    def test_recall_monotone(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=80)
        labels = rng.integers(0, 2, size=80)
        labels[0] = 1
        rs = [r for _, _, r in pr_curve(scores, labels)]
        assert all(b >= a for a, b in zip(rs, rs[1:]))

    def test_random_scores_precision_near_base_rate(self):
        rng = np.random.default_rng(5)
        n = 4000
        scores = rng.normal(size=n)
        labels = (rng.random(n) < 0.5).astype(int)
        curve = pr_curve(scores, labels)
        full_recall_precision = curve[-1][1]
        assert full_recall_precision == pytest.approx(labels.mean(), abs=0.02)

    def test_needs_positive(self):
        with pytest.raises(ShapeError):
            pr_curve([0.1, 0.2], [0, 0])

    def test_external_positive_denominator(self):
        # two of four true positives were never scored
        curve = pr_curve([0.9, 0.8], [1, 1], total_positives=4)
        assert curve[-1][2] == pytest.approx(0.5)

    def test_best_f1(self):
        curve = pr_curve([0.9, 0.8, 0.2], [1, 1, 0])
        assert best_f1(curve) == 1.0

    def test_csv(self):
        text = pr_curve_to_csv([(0.5, 1.0, 0.25)])
        assert text.splitlines()[0] == "threshold,precision,recall"
        assert text.splitlines()[1] == "0.5,1.0,0.25"


class TestSplit:
    def test_exact_counts(self):
        split = make_split(100, "inductive", (0.8, 0.1, 0.1), seed=0)
        assert (len(split.train), len(split.val), len(split.test)) == (80, 10, 10)

    def test_same_seed_identical(self):
        a = make_split(57, "transductive", seed=9)
        b = make_split(57, "transductive", seed=9)
        assert all(np.array_equal(x, y) for x, y in
                   [(a.train, b.train), (a.val, b.val), (a.test, b.test)])

    def test_partition_disjoint_exhaustive(self):
        split = make_split(83, "inductive", (0.6, 0.2, 0.2), seed=1)
        combined = np.concatenate([split.train, split.val, split.test])
        assert sorted(combined.tolist()) == list(range(83))

    def test_empty_part_rejected(self):
        with pytest.raises(ConfigError):
            make_split(3, "inductive", (0.98, 0.01, 0.01), seed=0)

    def test_bad_ratios(self):
        with pytest.raises(ConfigError):
            make_split(10, "inductive", (0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            make_split(10, "oops", (0.8, 0.1, 0.1))

    def test_masks(self):
        split = make_split(10, "transductive", (0.6, 0.2, 0.2), seed=2)
        train_m, val_m, test_m = split.masks(10)
        assert (train_m | val_m | test_m).all()
        assert not (train_m & val_m).any()


def line_graph_task(rng, n=20, d=3):
    edges = [(i, i + 1) for i in range(n - 1)]
    g = build_graph(n, edges, rng.normal(size=(n, d)))
    labels = rng.integers(0, 2, size=n)
    return TaskData(g, np.arange(n), labels)


class TestHeads:
    def test_zero_weight_zero_logits(self):
        head = build_head("node", 4, classes=2, seed=0)
        head.params["W"].data[:] = 0.0
        emb = Tensor(np.random.default_rng(0).normal(size=(5, 4)))
        out = apply_head(head, emb, [0, 3])
        assert np.array_equal(out.data, np.zeros((2, 2)))

    def test_edge_head_order_sensitive(self):
        rng = np.random.default_rng(6)
        head = build_head("edge", 3, hidden=5, seed=1)
        emb = Tensor(rng.normal(size=(4, 3)))
        ab = apply_head(head, emb, [(0, 1)]).item()
        ba = apply_head(head, emb, [(1, 0)]).item()
        assert ab != ba

    def test_graph_head_identical_embeddings(self):
        head = build_head("graph", 3, classes=2, seed=2)
        row = np.array([0.3, -0.7, 1.1])
        many = apply_head(head, Tensor(np.tile(row, (6, 1))), np.zeros(6, dtype=int))
        single = apply_head(head, Tensor(row.reshape(1, 3)), np.zeros(1, dtype=int))
        assert np.allclose(many.data, single.data)

    def test_level_query_mismatch(self):
        head = build_head("node", 3)
        with pytest.raises(ShapeError):
            apply_head(head, Tensor(np.ones((4, 3))), [(0, 1)])
        edge_head = build_head("edge", 3)
        with pytest.raises(ShapeError):
            apply_head(edge_head, Tensor(np.ones((4, 3))), [0, 1])

    def test_head_serialization(self):
        head = build_head("edge", 4, hidden=6, seed=3)
        restored = head_from_doc(head_to_doc(head))
        emb = Tensor(np.random.default_rng(1).normal(size=(5, 4)))
        a = apply_head(head, emb, [(1, 2)]).item()
        b = apply_head(restored, emb, [(1, 2)]).item()
        assert a == b


class TestTrain:
    def test_zero_epochs_keeps_initial_params(self):
        rng = np.random.default_rng(7)
        task = line_graph_task(rng)
        model = build_model([LayerSpec("sage", 3, 4, activation="tanh")], seed=0)
        head = build_head("node", 4, seed=0)
        before = [p.data.copy() for p in model.parameters() + head.parameters()]
        result = train(model, head, task, None, epochs=0)
        after = [p.data for p in model.parameters() + head.parameters()]
        assert result.history == []
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    def test_separable_features_reach_perfect_accuracy(self):
        rng = np.random.default_rng(8)
        n = 40
        labels = rng.integers(0, 2, size=n)
        feats = rng.normal(size=(n, 3)) + labels[:, None] * np.array([4.0, -4.0, 2.0])
        g = build_graph(n, [], feats)
        task = TaskData(g, np.arange(n), labels)
        model = build_model([], seed=0)  # no layers: raw features
        head = build_head("node", 3, classes=2, seed=4)
        train(model, head, task, None, epochs=200, lr=0.05)
        pred = predict_scores(model, head, task).argmax(axis=1)
        assert (pred == labels).mean() == 1.0

    def test_loss_trend_down(self):
        rng = np.random.default_rng(9)
        task = line_graph_task(rng)
        model = build_model([LayerSpec("gcn", 3, 4, activation="tanh")], seed=1)
        head = build_head("node", 4, seed=1)
        result = train(model, head, task, None, epochs=40, lr=0.02)
        losses = [row["train_loss"] for row in result.history]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_early_stop_restores_best(self):
        rng = np.random.default_rng(10)
        train_task = line_graph_task(rng)
        val_task = line_graph_task(rng)  # unrelated labels: val will wander
        model = build_model([LayerSpec("sage", 3, 4, activation="tanh")], seed=2)
        head = build_head("node", 4, seed=2)
        result = train(model, head, train_task, val_task, epochs=60, lr=0.05, patience=5)
        val_losses = [row["val_loss"] for row in result.history]
        assert result.best_val_loss == pytest.approx(min(val_losses))
        # restored parameters reproduce the best epoch's val loss
        h = predict_scores(model, head, val_task)
        restored = ad.cross_entropy_with_logits(Tensor(h), val_task.labels).item()
        assert restored == pytest.approx(result.best_val_loss, rel=1e-9)

    @pytest.mark.filterwarnings("ignore:invalid value encountered")
    def test_non_finite_loss_aborts(self):
        rng = np.random.default_rng(11)
        task = line_graph_task(rng)
        model = build_model([], seed=0)
        head = build_head("node", 3, seed=0)
        head.params["W"].data[:] = np.inf
        with pytest.raises(TrainingError):
            train(model, head, task, None, epochs=3)

    def test_merge_task_data_offsets(self):
        rng = np.random.default_rng(12)
        a = line_graph_task(rng, n=5)
        b = line_graph_task(rng, n=7)
        merged = merge_task_data([a, b])
        assert merged.graph.num_nodes == 12
        assert merged.query.tolist() == list(range(5)) + [5 + i for i in range(7)]
        assert np.array_equal(merged.labels[:5], a.labels)

    def test_history_csv(self):
        text = history_to_csv([{"epoch": 0, "train_loss": 0.5, "val_loss": 0.25}])
        assert text.splitlines() == ["epoch,train_loss,val_loss", "0,0.5,0.25"]
