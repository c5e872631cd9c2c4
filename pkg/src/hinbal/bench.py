"""Planted-structure heterogeneous graphs for desk-scale experiments.

Every neighbor type is cut into one block per class plus a background block
of equal size. A class-``c`` target links into block ``b`` with probability
proportional to ``affinity`` when ``b == c`` and to ``1 - affinity``
otherwise, so ``affinity = 1`` keeps targets inside their class block and
``affinity = 0.5`` makes block choice independent of class. Minority classes
get a reduced degree budget, which plants the neighbor-count disparity that
synthetic nodes are meant to repair.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .hin import Dataset, HinGraph, NetworkSchema, NodeType, Relation, build_imbalanced_split, make_adjacency


@dataclass(frozen=True)
class NeighborSpec:
    name: str
    count: int
    mean_degree: float
    affinity: float
    attr_dim: int = 0


@dataclass(frozen=True)
class PlantedHinConfig:
    num_classes: int = 3
    nodes_per_class: int = 500
    neighbors: tuple[NeighborSpec, ...] = ()
    minority_classes: tuple[int, ...] = (2,)
    minority_degree_scale: float = 0.5
    attr_dim: int = 16
    separation: float = 1.0
    noise: float = 1.0
    label_rate: float = 0.06
    imb_ratio: float = 0.1
    target_name: str = "paper"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.nodes_per_class < 1:
            raise ValueError("need at least two classes and one node per class")
        for nb in self.neighbors:
            if nb.count < 1:
                raise ValueError(f"neighbor type {nb.name!r} needs at least one node")
            if not 0 <= nb.affinity <= 1:
                raise ValueError(f"neighbor type {nb.name!r}: affinity outside [0, 1]")
            if nb.mean_degree < 0:
                raise ValueError(f"neighbor type {nb.name!r}: negative mean degree")
            if nb.count < self.num_classes + 1:
                raise ValueError(f"neighbor type {nb.name!r}: {nb.count} nodes cannot form {self.num_classes + 1} blocks")
        if not 0 < self.minority_degree_scale <= 1:
            raise ValueError("minority_degree_scale must lie in (0, 1]")
        if self.noise < 0 or self.separation < 0:
            raise ValueError("noise and separation must be non-negative")


@dataclass(eq=False)
class GroundTruth:
    blocks: dict[str, np.ndarray]  # block id per neighbor node; num_classes marks background
    class_means: np.ndarray
    labels: np.ndarray


PRESETS = {
    "tiny": PlantedHinConfig(
        num_classes=2,
        nodes_per_class=10,
        neighbors=(
            NeighborSpec("author", 12, 2.0, 0.9),
            NeighborSpec("venue", 6, 2.0, 0.9, attr_dim=3),
        ),
        minority_classes=(1,),
        attr_dim=4,
        separation=1.0,
        noise=0.5,
        label_rate=0.5,
        imb_ratio=0.4,
    ),
    "desk": PlantedHinConfig(
        num_classes=4,
        nodes_per_class=500,
        neighbors=(
            NeighborSpec("author", 75, 3.0, 0.9, attr_dim=8),
            NeighborSpec("term", 50, 4.0, 0.85, attr_dim=8),
            NeighborSpec("venue", 25, 2.0, 0.9, attr_dim=4),
        ),
        minority_classes=(2, 3),
        minority_degree_scale=0.5,
        attr_dim=16,
        separation=1.0,
        noise=1.0,
        label_rate=0.06,
        imb_ratio=0.1,
    ),
}


def preset(name: str, **overrides) -> PlantedHinConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides)


def _block_ids(count: int, num_blocks: int) -> np.ndarray:
    # contiguous, near-equal blocks; the last block is background
    return np.minimum((np.arange(count) * num_blocks) // count, num_blocks - 1)


def block_probabilities(affinity: float, num_classes: int) -> np.ndarray:
    """(classes x blocks) link probabilities; the last column is the background block."""
    w = np.full((num_classes, num_classes + 1), 1.0 - affinity)
    w[np.arange(num_classes), np.arange(num_classes)] = affinity
    rows = w.sum(axis=1, keepdims=True)
    if np.any(rows == 0):
        raise ValueError("affinity leaves a class with no admissible block")
    return w / rows


def sample_block_edges(labels, blocks, probs, degrees, rng):
    members = [np.flatnonzero(blocks == b) for b in range(probs.shape[1])]
    edges = []
    for v, (c, d) in enumerate(zip(labels, degrees)):
        if d == 0:
            continue
        chosen = rng.choice(probs.shape[1], size=d, p=probs[c])
        for b in chosen:
            pool = members[b]
            edges.append((v, int(pool[rng.integers(pool.size)])))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def generate(cfg: PlantedHinConfig) -> tuple[Dataset, GroundTruth]:
    """Planted graph, its imbalanced split and the generating ground truth."""
    rng = np.random.default_rng(cfg.seed)
    m = cfg.num_classes
    n_t = m * cfg.nodes_per_class
    labels = np.repeat(np.arange(m), cfg.nodes_per_class)

    means = rng.normal(size=(m, cfg.attr_dim))
    means *= cfg.separation / np.linalg.norm(means, axis=1, keepdims=True)
    x_t = means[labels] + cfg.noise * rng.normal(size=(n_t, cfg.attr_dim))

    types = [NodeType(cfg.target_name, n_t, cfg.attr_dim)]
    rels, adj, attrs, blocks = [], [], {0: x_t}, {}
    scale = np.where(np.isin(labels, cfg.minority_classes), cfg.minority_degree_scale, 1.0)
    for k, nb in enumerate(cfg.neighbors, start=1):
        types.append(NodeType(nb.name, nb.count, nb.attr_dim))
        b = _block_ids(nb.count, m + 1)
        blocks[nb.name] = b
        probs = block_probabilities(nb.affinity, m)
        lam = nb.mean_degree * scale
        # at least one edge per target keeps every target reachable from each neighbor type
        deg = 1 + rng.poisson(np.maximum(lam - 1.0, 0.0))
        if nb.mean_degree == 0:
            deg = np.zeros(n_t, dtype=np.int64)
        edges = sample_block_edges(labels, b, probs, deg, rng)
        rels.append(Relation(f"{cfg.target_name}-{nb.name}", 0, k))
        adj.append(make_adjacency(edges, (n_t, nb.count)))
        if nb.attr_dim:
            bmeans = rng.normal(size=(m + 1, nb.attr_dim))
            bmeans *= cfg.separation / np.linalg.norm(bmeans, axis=1, keepdims=True)
            attrs[k] = bmeans[b] + cfg.noise * rng.normal(size=(nb.count, nb.attr_dim))
    graph = HinGraph(NetworkSchema(tuple(types), tuple(rels)), tuple(adj), attrs)
    split = build_imbalanced_split(graph, 0, labels, cfg.label_rate, cfg.imb_ratio, cfg.minority_classes, cfg.seed, m)
    ds = Dataset(graph, 0, labels, m, tuple(cfg.minority_classes), split, {"generator": "planted", "seed": cfg.seed})
    return ds, GroundTruth(blocks, means, labels)
