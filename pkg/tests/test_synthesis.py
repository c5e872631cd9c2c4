import json
import math

import numpy as np
import pytest

from conftest import random_hin, random_labels
from hinbal.hin import LabelSpec, load_dataset, neighbor_slots, slot_matrix
from hinbal.influence import InfluenceTable, build_influence_tables
from hinbal.synthesis import (
    EmptyDegreeWarning,
    SynthesisConfig,
    attribute_saliency,
    augment_graph,
    plan_counts,
    read_batch_manifest,
    retained_mask,
    sample_degree,
    sample_neighbors,
    synthesize_attributes,
    synthesize_batch,
    synthesize_topology,
    write_augmented,
)


def _spec_from_train_sizes(sizes, minority):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = len(labels)
    return LabelSpec(0, len(sizes), labels, np.ones(n, bool), np.zeros(n, bool), np.zeros(n, bool), minority)


def test_plan_counts_examples():
    spec = _spec_from_train_sizes((60, 60, 600, 600), (0, 1))
    assert plan_counts(spec, SynthesisConfig()) == {0: 540, 1: 540}
    assert plan_counts(spec, SynthesisConfig(oversample_to=0.5)) == {0: 240, 1: 240}
    balanced = _spec_from_train_sizes((5, 5), (1,))
    assert plan_counts(balanced, SynthesisConfig()) == {1: 0}


def test_sample_degree_examples():
    rng = np.random.default_rng(0)
    assert {sample_degree(np.array([2, 2, 2]), rng) for _ in range(50)} == {2}
    draws = np.array([sample_degree(np.array([1, 3]), rng) for _ in range(10_000)])
    assert set(np.unique(draws)) == {1, 3}
    frac = (draws == 1).mean()
    assert abs(frac - 0.5) <= 3 * math.sqrt(0.25 / 10_000)
    with pytest.warns(EmptyDegreeWarning):
        assert sample_degree(np.array([], dtype=int), rng) == 1


def test_sample_neighbors_examples():
    rng = np.random.default_rng(1)
    assert list(sample_neighbors(np.array([4, 8, 9]), 5, rng)) == [4, 8, 9]
    assert {int(sample_neighbors(np.array([7, 9]), 1, rng)[0]) for _ in range(100)} == {7, 9}
    with pytest.raises(ValueError):
        sample_neighbors(np.array([], dtype=int), 1, rng)


def test_sample_neighbors_uniform_marginals():
    rng = np.random.default_rng(2)
    cand = np.array([3, 5, 8, 13, 21])
    hits = {int(c): 0 for c in cand}
    trials = 10_000
    for _ in range(trials):
        picked = sample_neighbors(cand, 2, rng)
        assert len(set(picked.tolist())) == 2
        for v in picked:
            hits[int(v)] += 1
    p = 2 / 5
    sigma = math.sqrt(trials * p * (1 - p))
    for c in cand:
        assert abs(hits[int(c)] - trials * p) <= 4 * sigma


def test_saliency_examples():
    g = np.array([[-2.0, 0.0, 3.0], [0.0, 0.0, 0.0]])
    assert list(attribute_saliency(g, 0)) == [2.0, 0.0, 3.0]
    assert list(attribute_saliency(g, 1)) == [0.0, 0.0, 0.0]


def test_saliency_of_linear_model_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = rng.normal(size=5)
    x = rng.normal(size=(1, 5))
    h = 1e-6
    fd = np.array([(w @ (x[0] + h * e) - w @ (x[0] - h * e)) / (2 * h) for e in np.eye(5)])
    assert np.allclose(attribute_saliency(fd[None, :], 0), np.abs(w), atol=1e-8)


def test_synthesize_attributes_examples():
    x_a = np.array([1.0, 2.0, 3.0, 4.0])
    x_b = np.array([10.0, 20.0, 30.0, 40.0])
    assert np.array_equal(synthesize_attributes(x_a, x_b, np.ones(4), 100, 0.3), x_a)
    assert np.array_equal(synthesize_attributes([1.0, 1.0], [3.0, 3.0], [0.0, 0.0], 0, 0.5), [2.0, 2.0])
    got = synthesize_attributes(x_a, x_b, np.array([9.0, 0, 0, 5]), 50, 0.0)
    assert np.array_equal(got, [1.0, 20.0, 30.0, 4.0])
    with pytest.raises(ValueError):
        synthesize_attributes(x_a, x_b[:3], np.ones(4), 10, 0.5)


def test_retained_mask_size_and_ties():
    s = np.array([1.0, 1.0, 1.0, 0.5, 2.0])
    m = retained_mask(s, 40)  # ceil(2.0) = 2 -> index 4 then the lowest-id tie
    assert list(np.flatnonzero(m)) == [0, 4]
    for k in (0, 10, 33, 50, 99, 100):
        assert retained_mask(np.arange(16.0), k).sum() == math.ceil(k * 16 / 100)


def _toy6():
    # 6 target nodes on a small random HIN with two minority train members
    rng = np.random.default_rng(4)
    g = random_hin(rng, n_target=6, n_author=4, n_venue=3, p=0.5, self_rel=True)
    labels = np.array([0, 0, 0, 1, 1, 0])
    train = np.array([1, 1, 1, 1, 1, 0], bool)
    spec = LabelSpec(0, 2, labels, train, np.zeros(6, bool), ~train, (1,))
    return g, spec


def _audit(graph, labels, tables, batch):
    mats = {s.name: slot_matrix(graph, s) for s in neighbor_slots(graph.schema, 0)}
    for i, c in enumerate(batch.classes):
        a, b = batch.parents[i]
        assert labels.labels[a] == c and labels.labels[b] == c
        assert labels.train_mask[a] and labels.train_mask[b]
        members = labels.members(c)
        if members.size >= 2:
            assert a != b
        for slot, lists in batch.neighbors.items():
            nb = lists[i]
            assert set(nb.tolist()) <= set(tables[(c, slot)].candidates.tolist())
            support = set(np.diff(mats[slot].indptr)[members].tolist())
            cand_size = len(tables[(c, slot)].candidates)
            # degree comes from the empirical support, clipped by the candidate pool
            assert len(nb) in {min(max(d, 0), cand_size) for d in support} or (not support and len(nb) == 1)


def test_toy_batch_audit():
    g, spec = _toy6()
    tables = build_influence_tables(g, spec, mu=1)
    cfg = SynthesisConfig(mu=1, seed=5)
    batch = synthesize_batch(g, spec, tables, cfg, rng=5)
    assert len(batch) == 3 - 2
    assert np.array_equal(batch.ids, [6])
    _audit(g, spec, tables, batch)


def test_tiny_preset_containment_and_balance(tiny):
    ds, _ = tiny
    g, spec = ds.graph, ds.split
    for mu in (1, 2, 5, "ALL"):
        for mode in ("influence", "random", "minority"):
            tables = build_influence_tables(g, spec, mu=mu, mode=mode)
            batch = synthesize_batch(g, spec, tables, SynthesisConfig(mu=mu, candidate_mode=mode), rng=0)
            _audit(g, spec, tables, batch)
            aug, alab = augment_graph(g, spec, batch)
            counts = alab.class_counts(alab.train_mask)
            assert np.all(counts == counts.max())


def test_single_member_class_copies_parent():
    rng = np.random.default_rng(6)
    g = random_hin(rng, n_target=12)
    labels = random_labels(rng, 12, train_per_class=(3, 3, 1))
    tables = build_influence_tables(g, labels)
    batch = synthesize_batch(g, labels, tables, SynthesisConfig(k_percent=0), rng=1)
    v = labels.members(2)[0]
    assert np.all(batch.parents == v)
    assert np.allclose(batch.attributes, g.attributes[0][v], atol=1e-15)


def test_determinism_and_class_streams(rng):
    g = random_hin(rng, n_target=30, n_author=15, n_venue=6)
    labels = random_labels(rng, 30, train_per_class=(6, 2, 2), minority=(1, 2))
    tables = build_influence_tables(g, labels)
    grads = rng.normal(size=g.attributes[0].shape)
    b1 = synthesize_batch(g, labels, tables, SynthesisConfig(), grads, rng=11)
    b2 = synthesize_batch(g, labels, tables, SynthesisConfig(), grads, rng=11)
    assert np.array_equal(b1.parents, b2.parents) and np.array_equal(b1.deltas, b2.deltas)
    assert np.array_equal(b1.attributes, b2.attributes)
    for slot in b1.neighbors:
        assert all(np.array_equal(x, y) for x, y in zip(b1.neighbors[slot], b2.neighbors[slot]))
    # dropping class 1 leaves class 2's draws untouched
    only2 = LabelSpec(0, 3, labels.labels, labels.train_mask, labels.val_mask, labels.test_mask, (2,))
    b3 = synthesize_topology(g, only2, tables, SynthesisConfig(), rng=11)
    assert np.array_equal(b3.parents, b1.parents[b1.classes == 2])


def test_augment_graph_edges_and_masks(rng):
    g = random_hin(rng, n_target=20, self_rel=True)
    labels = random_labels(rng, 20)
    tables = build_influence_tables(g, labels)
    batch = synthesize_batch(g, labels, tables, SynthesisConfig(), rng=3)
    aug, alab = augment_graph(g, labels, batch)
    n = 20
    assert aug.num_nodes(0) == n + len(batch)
    for s in neighbor_slots(g.schema, 0):
        m = slot_matrix(aug, s)
        assert (m[:n, : m.shape[1] if s.neighbor_type else n] != slot_matrix(g, s)).nnz == 0
        for i, nb in enumerate(batch.neighbors[s.name]):
            assert set(m[n + i].indices.tolist()) >= set(nb.tolist())
    assert alab.train_mask[n:].all() and not alab.val_mask[n:].any() and not alab.test_mask[n:].any()
    assert np.array_equal(alab.labels[n:], batch.classes)


def test_write_augmented_round_trip(tmp_path, tiny):
    ds, _ = tiny
    tables = build_influence_tables(ds.graph, ds.split)
    batch = synthesize_batch(ds.graph, ds.split, tables, SynthesisConfig(), rng=0)
    write_augmented(tmp_path, ds.graph, ds.split, batch)
    back = load_dataset(tmp_path)
    n = ds.graph.num_nodes(0)
    assert back.graph.num_nodes(0) == n + len(batch)
    manifest = json.loads((tmp_path / "synthetic.json").read_text())
    assert manifest["synthetic_ids"] == [n, n + len(batch)]
    again = read_batch_manifest(tmp_path / "synthetic.json", back.graph.attributes[0][n:])
    assert np.array_equal(again.parents, batch.parents) and np.array_equal(again.deltas, batch.deltas)
    assert np.array_equal(again.attributes, batch.attributes)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(k_percent=101)
    with pytest.raises(ValueError):
        SynthesisConfig(mu=0)
    with pytest.raises(ValueError):
        SynthesisConfig(oversample_to="double")


def test_explicit_table_object_is_accepted():
    t = InfluenceTable(1, 2, np.ones(4), np.array([1, 3]), 2)
    out = sample_neighbors(t, 5, np.random.default_rng(0))
    assert list(out) == [1, 3]
