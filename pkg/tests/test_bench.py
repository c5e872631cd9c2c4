import numpy as np
import pytest
from scipy.stats import chi2_contingency

from hinbal.bench import NeighborSpec, PlantedHinConfig, block_probabilities, generate, preset
from hinbal.influence import aggregate_influence, minority_influence


def _nearest_mean_accuracy(ds, gt):
    x = ds.graph.attributes[0]
    d = ((x[:, None, :] - gt.class_means[None, :, :]) ** 2).sum(axis=2)
    test = ds.split.test_mask
    return float((d.argmin(axis=1)[test] == ds.labels[test]).mean())


def test_noiseless_full_affinity_is_separable():
    cfg = preset("desk", noise=0.0, neighbors=(NeighborSpec("author", 80, 3.0, 1.0), NeighborSpec("venue", 20, 1.0, 1.0)))
    ds, gt = generate(cfg)
    assert _nearest_mean_accuracy(ds, gt) == 1.0
    for k, nb in enumerate(cfg.neighbors, start=1):
        a = ds.graph.adjacency[k - 1].tocoo()
        assert np.array_equal(gt.blocks[nb.name][a.col], ds.labels[a.row])


def test_half_affinity_carries_no_class_signal():
    cfg = preset("desk", seed=3, neighbors=(NeighborSpec("author", 400, 9.0, 0.5),))
    ds, gt = generate(cfg)
    a = ds.graph.adjacency[0].tocoo()
    assert a.nnz >= 10_000
    table = np.zeros((cfg.num_classes, cfg.num_classes + 1))
    np.add.at(table, (ds.labels[a.row], gt.blocks["author"][a.col]), 1)
    assert chi2_contingency(table).pvalue > 1e-3


def test_block_probabilities_rows():
    p = block_probabilities(0.8, 3)
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(np.diag(p), 0.8 / (0.8 + 3 * 0.2))
    assert np.allclose(block_probabilities(0.5, 4), 1 / 5)


def test_planted_recoverability():
    neighbors = (NeighborSpec("author", 200, 3.0, 0.98), NeighborSpec("term", 100, 4.0, 0.98))
    for seed in range(5):
        cfg = PlantedHinConfig(num_classes=3, nodes_per_class=500, neighbors=neighbors, minority_classes=(2,),
                               label_rate=0.2, imb_ratio=0.5, seed=seed)
        ds, gt = generate(cfg)
        for c in cfg.minority_classes:
            members = ds.split.members(c)
            for k, nb in enumerate(neighbors, start=1):
                block = aggregate_influence(ds.graph, 0, k, columns=members)
                scores = minority_influence(block, np.arange(members.size))
                in_block = gt.blocks[nb.name] == c
                top = np.argsort(-scores, kind="stable")[: in_block.sum()]
                assert in_block[top].mean() >= 0.9, (seed, nb.name)


def test_minority_has_fewer_neighbors():
    for name in ("tiny", "desk"):
        ds, _ = generate(preset(name))
        minority = np.isin(ds.labels, ds.minority_classes)
        for a in ds.graph.adjacency:
            deg = np.diff(a.tocsr().indptr)
            assert deg[minority].mean() < deg[~minority].mean()


def test_presets_and_determinism():
    ds, _ = generate(preset("tiny"))
    assert sum(ds.graph.schema.node_types[t].count for t in range(len(ds.graph.schema.node_types))) <= 60
    big, _ = generate(preset("desk"))
    assert 1500 <= big.graph.num_nodes(0) <= 2500
    a, ga = generate(preset("desk", seed=4))
    b, gb = generate(preset("desk", seed=4))
    assert all((x != y).nnz == 0 for x, y in zip(a.graph.adjacency, b.graph.adjacency))
    assert all(np.array_equal(a.graph.attributes[t], b.graph.attributes[t]) for t in a.graph.attributes)
    assert np.array_equal(a.split.train_mask, b.split.train_mask)
    c, _ = generate(preset("desk", seed=5))
    assert not np.array_equal(a.graph.attributes[0], c.graph.attributes[0])


def test_infeasible_configs_raise():
    with pytest.raises(ValueError):
        PlantedHinConfig(neighbors=(NeighborSpec("venue", 3, 1.0, 0.9),))  # fewer nodes than blocks
    with pytest.raises(ValueError):
        PlantedHinConfig(neighbors=(NeighborSpec("author", 30, 1.0, 1.5),))
    with pytest.raises(ValueError):
        PlantedHinConfig(nodes_per_class=0)
    with pytest.raises(KeyError):
        preset("huge")
