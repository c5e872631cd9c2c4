import math

import numpy as np
import pytest

from hinbal.encoder import adam_step, backward, build_plan, forward, init_state
from hinbal.objective import classification_loss
from hinbal.train_eval import (
    VANILLA_OVERRIDES,
    ExperimentError,
    TrainConfig,
    aggregate,
    apply_overrides,
    compute_metrics,
    config_from_dict,
    config_hash,
    config_to_dict,
    grid_points,
    metrics_from_confusion,
    run_experiment,
    summarize,
    sweep,
)

FAST = TrainConfig(epochs=12, patience=100)


def test_metrics_perfect():
    y = np.array([0, 1, 2, 2, 1])
    m = compute_metrics(y, y, np.ones(5, bool))
    assert m.acc == m.bacc == m.macro_f1 == 1.0


def test_metrics_always_majority():
    y = np.array([0] * 90 + [1] * 10)
    m = compute_metrics(np.zeros(100, int), y, np.ones(100, bool))
    assert abs(m.acc - 0.9) <= 1e-12 and abs(m.bacc - 0.5) <= 1e-12
    assert abs(m.macro_f1 - (2 * 0.9 / 1.9) / 2) <= 1e-12
    assert round(m.macro_f1, 4) == 0.4737


def test_metrics_from_confusion_example():
    m = metrics_from_confusion(np.array([[2, 1], [1, 2]]))
    assert abs(m.acc - 4 / 6) <= 1e-12 and abs(m.bacc - 2 / 3) <= 1e-12 and abs(m.macro_f1 - 2 / 3) <= 1e-12


def test_metrics_confusion_rows_and_mask():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 200)
    p = rng.integers(0, 3, 200)
    mask = rng.random(200) < 0.6
    y_masked = y.copy()
    y_masked[:10] = -1  # unlabeled nodes never count
    m = compute_metrics(p, y_masked, mask, 3)
    keep = mask & (y_masked >= 0)
    cm = np.array(m.confusion)
    assert np.array_equal(cm.sum(axis=1), np.bincount(y[keep], minlength=3))
    assert abs(m.acc - np.trace(cm) / cm.sum()) <= 1e-15
    f1 = []
    for c in range(3):
        tp = np.sum((p == c) & (y == c) & keep)
        prec = tp / max(np.sum((p == c) & keep), 1)
        rec = tp / np.sum((y == c) & keep)
        f1.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    assert abs(m.macro_f1 - np.mean(f1)) <= 1e-12


def test_metrics_zero_precision_recall_class():
    m = metrics_from_confusion(np.array([[3, 0], [2, 0]]))
    assert m.f1[1] == 0.0 and abs(m.macro_f1 - (2 * 0.6 / 1.6) / 2) <= 1e-12


def test_aggregate_population_std():
    rows = [{"macro_f1": 0.5, "acc": 0.1, "bacc": 0.2}, {"macro_f1": 0.7, "acc": 0.3, "bacc": 0.4}]
    agg = aggregate(rows)
    assert abs(agg["macro_f1"]["mean"] - 0.6) <= 1e-12 and abs(agg["macro_f1"]["std"] - 0.1) <= 1e-12


def test_config_strict_and_overrides():
    cfg = apply_overrides(TrainConfig(), {"mu": "ALL", "T": 0.5, "lr": 0.002, "synthesis.k_percent": 10})
    assert cfg.synthesis.mu == "ALL" and cfg.loss.temperature == 0.5 and cfg.lr == 0.002
    assert cfg.synthesis.k_percent == 10
    with pytest.raises(ValueError):
        apply_overrides(TrainConfig(), {"loss.bogus": 1})
    with pytest.raises(ValueError):
        config_from_dict({"nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    back = config_from_dict(config_to_dict(cfg))
    assert back == cfg
    assert config_hash(cfg) == config_hash(cfg.with_seed(9)) != config_hash(TrainConfig())


def test_vanilla_config_is_plain_supervised_training(tiny):
    ds, _ = tiny
    g, spec = ds.graph, ds.split
    cfg = apply_overrides(FAST, VANILLA_OVERRIDES).with_seed(3)
    res = run_experiment(g, spec, cfg)
    assert len(res.batch) == 0

    # hand-written loop: cross-entropy on real train nodes, Adam, best val macro-F1
    state = init_state(g, 0, spec.num_classes, cfg.model)
    plan = build_plan(g)
    best, best_logits = -1.0, None
    for epoch in range(cfg.epochs):
        _, logits, tape = forward(g, state, None, plan)
        loss, dlogits = classification_loss(logits, spec.labels, spec.train_mask)
        assert abs(res.log[epoch]["L_cla"] - loss) <= 1e-12
        f1 = compute_metrics(logits.argmax(1), spec.labels, spec.val_mask, spec.num_classes).macro_f1
        if f1 > best:
            best, best_logits = f1, logits
        grads, _ = backward(tape, state, None, dlogits)
        adam_step(state, grads, cfg.lr)
    want = compute_metrics(best_logits.argmax(1), spec.labels, spec.test_mask, spec.num_classes)
    assert res.metrics == want


def test_run_is_deterministic_and_isolated(tiny):
    ds, _ = tiny
    a = run_experiment(ds.graph, ds.split, FAST.with_seed(1))
    b = run_experiment(ds.graph, ds.split, FAST.with_seed(1))
    assert a.metrics == b.metrics and a.log == b.log
    n = ds.graph.num_nodes(0)
    assert len(a.batch) > 0 and a.batch.ids.min() >= n
    assert all(ds.split.train_mask[p].all() for p in a.batch.parents)
    assert 0 <= a.best_epoch < FAST.epochs
    assert a.log[a.best_epoch]["val_macro_f1"] == max(r["val_macro_f1"] for r in a.log)


def test_log_records_identity(tiny):
    ds, _ = tiny
    res = run_experiment(ds.graph, ds.split, FAST)
    for r in res.log:
        assert abs(r["L_total"] - (r["L_cla"] + r["L_sem"] + r["L_pro"])) <= 1e-12
        assert {"epoch", "L_cla", "L_sem", "L_pro", "L_total", "val_macro_f1"} <= set(r)


def test_early_stopping_patience(tiny):
    ds, _ = tiny
    res = run_experiment(ds.graph, ds.split, TrainConfig(epochs=200, patience=3))
    assert len(res.log) <= res.best_epoch + 5


def test_weight_decay_changes_training(tiny):
    ds, _ = tiny
    a = run_experiment(ds.graph, ds.split, FAST)
    b = run_experiment(ds.graph, ds.split, apply_overrides(FAST, {"weight_decay": 0.1}))
    assert a.log[0]["L_total"] == b.log[0]["L_total"]
    assert a.log[-1]["L_total"] != b.log[-1]["L_total"]


def test_stage_tagged_errors(tiny):
    ds, _ = tiny
    slot = next(iter(ds.graph.schema.relations)).name
    cfg = apply_overrides(FAST, {"meta_paths": {slot: [["no_such_relation"]]}})
    with pytest.raises(ExperimentError) as err:
        run_experiment(ds.graph, ds.split, cfg)
    assert err.value.stage == "synthesis"


def test_grid_and_sweep_cardinality(tiny):
    ds, _ = tiny
    grid = {"mu": [1, "ALL"], "T": [0.5, 1.0]}
    assert len(grid_points(grid)) == 4
    rows = sweep(ds.graph, ds.split, apply_overrides(FAST, {"epochs": 3}), grid, seeds=(0, 1))
    assert len(rows) == 8 and all(r["status"] == "ok" for r in rows)
    assert [(r["mu"], r["T"], r["seed"]) for r in rows[:3]] == [(1, 0.5, 0), (1, 0.5, 1), (1, 1.0, 0)]
    summary = summarize(rows, ["mu"])
    assert len(summary) == 2
    for s in summary:
        vals = [r["bacc"] for r in rows if r["mu"] == s["mu"]]
        assert abs(s["bacc_mean"] - np.mean(vals)) <= 1e-12 and abs(s["bacc_std"] - np.std(vals)) <= 1e-12
        assert s["n"] == 4


def test_single_point_sweep_matches_run(tiny):
    ds, _ = tiny
    cfg = apply_overrides(FAST, {"epochs": 4})
    row = sweep(ds.graph, ds.split, cfg, {"mu": [2]}, seeds=(5,))[0]
    res = run_experiment(ds.graph, ds.split, apply_overrides(cfg, {"mu": 2}).with_seed(5))
    assert row["bacc"] == res.metrics.bacc and row["macro_f1"] == res.metrics.macro_f1


def test_sweep_records_failures(tiny):
    ds, _ = tiny
    rows = sweep(ds.graph, ds.split, apply_overrides(FAST, {"epochs": 2}), {"lr": [0.01, -1.0]})
    assert [r["status"] for r in rows] == ["ok", "error"]
    assert math.isfinite(rows[0]["bacc"])
