"""Synthetic minority target nodes: counts, parents, neighbors and attributes.

Topology (parents, interpolation coefficient, neighbor lists) is drawn once;
attributes can be re-synthesized whenever fresh loss gradients are available.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .hin import (
    Dataset,
    HinGraph,
    LabelSpec,
    neighbor_slots,
    save_dataset,
    slot_matrix,
)
from .influence import ALL, InfluenceTable, rank_by_score


class EmptyDegreeWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SynthesisConfig:
    mu: float | str = 5
    k_percent: float = 10.0
    oversample_to: str | float = "match"  # "match" tops up to the largest class, a float r to ceil(r * largest)
    resample_topology_each_epoch: bool = False
    candidate_mode: str = "influence"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.k_percent <= 100:
            raise ValueError("k_percent must lie in [0, 100]")
        if isinstance(self.mu, str):
            if self.mu.upper() != ALL:
                raise ValueError(f"mu must be a positive number or {ALL!r}")
        elif not self.mu > 0:
            raise ValueError("mu must be positive")
        if isinstance(self.oversample_to, str):
            if self.oversample_to != "match":
                raise ValueError("oversample_to must be 'match' or a ratio in (0, 1]")
        elif not 0 < float(self.oversample_to) <= 1:
            raise ValueError("oversample ratio must lie in (0, 1]")


@dataclass(eq=False)
class SyntheticBatch:
    base_count: int
    classes: np.ndarray
    parents: np.ndarray  # (s, 2): saliency source first
    deltas: np.ndarray
    neighbors: dict[str, list[np.ndarray]]
    attributes: np.ndarray | None = None

    def __len__(self):
        return len(self.classes)

    @property
    def ids(self) -> np.ndarray:
        return self.base_count + np.arange(len(self.classes))

    def degrees(self, slot: str) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors[slot]], dtype=np.int64)


def plan_counts(labels: LabelSpec, cfg: SynthesisConfig) -> dict[int, int]:
    """Synthetic nodes to create per minority class."""
    counts = labels.class_counts(labels.train_mask)
    largest = int(counts.max())
    goal = largest if cfg.oversample_to == "match" else math.ceil(round(float(cfg.oversample_to) * largest, 9))
    plan = {}
    for c in labels.minority_classes:
        if counts[c] == 0:
            raise ValueError(f"minority class {c} has no training member")
        plan[c] = max(goal - int(counts[c]), 0)
    return plan


def sample_degree(degrees: np.ndarray, rng: np.random.Generator) -> int:
    """Uniform draw from an empirical degree multiset (1 if the multiset is empty)."""
    degrees = np.asarray(degrees)
    if degrees.size == 0:
        warnings.warn("empty minority degree multiset, falling back to degree 1", EmptyDegreeWarning, stacklevel=2)
        return 1
    return int(degrees[rng.integers(degrees.size)])


def sample_neighbors(candidates: np.ndarray | InfluenceTable, degree: int, rng: np.random.Generator) -> np.ndarray:
    cand = candidates.candidates if isinstance(candidates, InfluenceTable) else np.asarray(candidates)
    if cand.size == 0:
        raise ValueError("candidate set is empty")
    k = min(int(degree), cand.size)
    return np.sort(rng.choice(cand, size=k, replace=False)).astype(np.int64)


def attribute_saliency(grad_wrt_attrs: np.ndarray, node: int) -> np.ndarray:
    return np.abs(np.asarray(grad_wrt_attrs)[node])


def retained_mask(saliency: np.ndarray, k_percent: float) -> np.ndarray:
    d = len(saliency)
    k = math.ceil(round(k_percent * d / 100.0, 9))
    mask = np.zeros(d, dtype=bool)
    mask[rank_by_score(saliency)[:k]] = True
    return mask


def synthesize_attributes(x_a, x_b, s_a, k_percent: float, delta: float) -> np.ndarray:
    """Keep the most salient ``k_percent`` of ``x_a``'s entries, interpolate the rest with ``x_b``."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    s_a = np.asarray(s_a, dtype=np.float64)
    if x_a.shape != x_b.shape or x_a.shape != s_a.shape:
        raise ValueError(f"dimension mismatch: {x_a.shape}, {x_b.shape}, {s_a.shape}")
    keep = retained_mask(s_a, k_percent)
    return np.where(keep, x_a, delta * x_a + (1.0 - delta) * x_b)


def _class_rngs(rng, classes):
    if isinstance(rng, np.random.Generator):
        seeds = rng.integers(0, 2**63 - 1, size=len(classes))
        return {c: np.random.default_rng(int(s)) for c, s in zip(classes, seeds)}
    base = 0 if rng is None else int(rng)
    return {c: np.random.default_rng([base, int(c)]) for c in classes}


def synthesize_topology(
    graph: HinGraph,
    labels: LabelSpec,
    tables: Mapping[tuple[int, str], InfluenceTable],
    cfg: SynthesisConfig,
    rng: np.random.Generator | int | None = None,
) -> SyntheticBatch:
    """Parents, interpolation coefficients and neighbor lists for every planned synthetic node.

    Each minority class draws from its own RNG stream, so classes are independent.
    """
    slots = neighbor_slots(graph.schema, labels.target_type)
    mats = {s.name: slot_matrix(graph, s) for s in slots}
    plan = plan_counts(labels, cfg)
    rngs = _class_rngs(cfg.seed if rng is None else rng, sorted(plan))
    classes, parents, deltas = [], [], []
    neigh: dict[str, list[np.ndarray]] = {s.name: [] for s in slots}
    for c in sorted(plan):
        r = rngs[c]
        members = labels.members(c)
        if members.size < 1:
            raise ValueError(f"class {c} has no training member to synthesize from")
        degs = {s.name: np.diff(mats[s.name].indptr)[members] for s in slots}
        for _ in range(plan[c]):
            a = int(members[r.integers(members.size)])
            if members.size >= 2:
                others = members[members != a]
                b = int(others[r.integers(others.size)])
            else:
                b = a
            classes.append(c)
            parents.append((a, b))
            deltas.append(float(r.uniform()))
            for s in slots:
                table = tables[(c, s.name)]
                deg = sample_degree(degs[s.name], r)
                neigh[s.name].append(sample_neighbors(table, deg, r))
    return SyntheticBatch(
        base_count=graph.num_nodes(labels.target_type),
        classes=np.array(classes, dtype=np.int64),
        parents=np.array(parents, dtype=np.int64).reshape(-1, 2),
        deltas=np.array(deltas, dtype=np.float64),
        neighbors=neigh,
    )


def synthesize_node_attributes(
    batch: SyntheticBatch,
    x: np.ndarray,
    k_percent: float,
    grads: np.ndarray | None = None,
) -> np.ndarray:
    """Attribute rows for every synthetic node.

    Saliency comes from ``|grads|`` of the first parent; without gradients the
    magnitudes of that parent's own attributes stand in.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((len(batch), x.shape[1]))
    for i, ((a, b), d) in enumerate(zip(batch.parents, batch.deltas)):
        s = attribute_saliency(grads, a) if grads is not None else np.abs(x[a])
        out[i] = synthesize_attributes(x[a], x[b], s, k_percent, d)
    return out


def synthesize_batch(
    graph: HinGraph,
    labels: LabelSpec,
    tables: Mapping[tuple[int, str], InfluenceTable],
    cfg: SynthesisConfig,
    grads: np.ndarray | None = None,
    rng: np.random.Generator | int | None = None,
) -> SyntheticBatch:
    batch = synthesize_topology(graph, labels, tables, cfg, rng)
    x = graph.attributes.get(labels.target_type)
    if x is not None:
        batch.attributes = synthesize_node_attributes(batch, x, cfg.k_percent, grads)
    return batch


def augment_graph(graph: HinGraph, labels: LabelSpec, batch: SyntheticBatch) -> tuple[HinGraph, LabelSpec]:
    """Append synthetic target nodes and their edges; synthetic nodes join the train mask."""
    tid = labels.target_type
    n = graph.num_nodes(tid)
    s = len(batch)
    schema = graph.schema.with_count(tid, n + s)
    slots = {sl.relation: [] for sl in neighbor_slots(graph.schema, tid)}
    for sl in neighbor_slots(graph.schema, tid):
        slots[sl.relation].append(sl)
    adj = []
    for rid, r in enumerate(graph.schema.relations):
        a = graph.adjacency[rid]
        shape = (n + s if r.src == tid else a.shape[0], n + s if r.dst == tid else a.shape[1])
        a = sp.csr_matrix((a.data, a.indices, np.concatenate([a.indptr, np.full(shape[0] - a.shape[0], a.indptr[-1])])),
                          shape=shape)
        extra_r, extra_c = [], []
        for sl in slots.get(rid, []):
            for i, nb in enumerate(batch.neighbors[sl.name]):
                if sl.target_is_src:
                    extra_r.append(np.full(len(nb), n + i))
                    extra_c.append(nb)
                else:
                    extra_r.append(nb)
                    extra_c.append(np.full(len(nb), n + i))
        if extra_r:
            rows = np.concatenate(extra_r).astype(np.int64)
            cols = np.concatenate(extra_c).astype(np.int64)
            a = a + sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)
        adj.append(a)
    attrs = dict(graph.attributes)
    if tid in attrs:
        if batch.attributes is None:
            raise ValueError("target type is attributed but the batch has no attributes")
        attrs[tid] = np.vstack([attrs[tid], batch.attributes])
    aug = HinGraph(schema, tuple(adj), attrs)
    pad_false = np.zeros(s, dtype=bool)
    aug_labels = LabelSpec(
        tid,
        labels.num_classes,
        np.concatenate([labels.labels, batch.classes]),
        np.concatenate([labels.train_mask, np.ones(s, dtype=bool)]),
        np.concatenate([labels.val_mask, pad_false]),
        np.concatenate([labels.test_mask, pad_false]),
        labels.minority_classes,
    )
    return aug, aug_labels


def write_augmented(out: str | Path, graph: HinGraph, labels: LabelSpec, batch: SyntheticBatch) -> None:
    """Persist the augmented graph in the dataset format plus a ``synthetic.json`` manifest."""
    aug, aug_labels = augment_graph(graph, labels, batch)
    full = aug_labels.labels.copy()
    save_dataset(out, Dataset(aug, labels.target_type, full, labels.num_classes, labels.minority_classes, aug_labels))
    manifest = {
        "base_count": int(batch.base_count),
        "synthetic_ids": [int(batch.base_count), int(batch.base_count + len(batch))],
        "classes": batch.classes.tolist(),
        "parents": batch.parents.tolist(),
        "deltas": [repr(float(d)) for d in batch.deltas],
        "neighbors": {k: [v.tolist() for v in vs] for k, vs in batch.neighbors.items()},
    }
    (Path(out) / "synthetic.json").write_text(json.dumps(manifest) + "\n")


def read_batch_manifest(path: str | Path, attributes: np.ndarray | None = None) -> SyntheticBatch:
    m = json.loads(Path(path).read_text())
    return SyntheticBatch(
        base_count=int(m["base_count"]),
        classes=np.array(m["classes"], dtype=np.int64),
        parents=np.array(m["parents"], dtype=np.int64).reshape(-1, 2),
        deltas=np.array([float(d) for d in m["deltas"]], dtype=np.float64),
        neighbors={k: [np.array(v, dtype=np.int64) for v in vs] for k, vs in m["neighbors"].items()},
        attributes=attributes,
    )


def empty_batch(graph: HinGraph, labels: LabelSpec) -> SyntheticBatch:
    x = graph.attributes.get(labels.target_type)
    return SyntheticBatch(
        base_count=graph.num_nodes(labels.target_type),
        classes=np.zeros(0, dtype=np.int64),
        parents=np.zeros((0, 2), dtype=np.int64),
        deltas=np.zeros(0),
        neighbors={s.name: [] for s in neighbor_slots(graph.schema, labels.target_type)},
        attributes=None if x is None else np.zeros((0, x.shape[1])),
    )
