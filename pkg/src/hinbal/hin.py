"""Heterogeneous information network containers, label splits and dataset I/O.

A graph is a schema (typed node registry plus typed relations), one binary
CSR adjacency per relation (rows are source nodes, columns are destination
nodes) and an optional dense attribute matrix per node type.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

UNLABELED = -1


class DataFormatError(ValueError):
    """Raised when a dataset directory is malformed."""


class DegenerateClassError(ValueError):
    pass


@dataclass(frozen=True)
class NodeType:
    name: str
    count: int
    attr_dim: int = 0  # 0 means attributeless


@dataclass(frozen=True)
class Relation:
    name: str
    src: int
    dst: int


@dataclass(frozen=True)
class NetworkSchema:
    node_types: tuple[NodeType, ...]
    relations: tuple[Relation, ...]

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        object.__setattr__(self, "relations", tuple(self.relations))
        if len(self.node_types) + len(self.relations) <= 2:
            raise ValueError("schema is not heterogeneous: need |A| + |R| > 2")
        names = [t.name for t in self.node_types]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate node type names: {names}")
        rnames = [r.name for r in self.relations]
        if len(set(rnames)) != len(rnames):
            raise ValueError(f"duplicate relation names: {rnames}")
        for t in self.node_types:
            if t.count < 0 or t.attr_dim < 0:
                raise ValueError(f"node type {t.name!r}: negative count or attr_dim")
        n = len(self.node_types)
        for r in self.relations:
            if not (0 <= r.src < n and 0 <= r.dst < n):
                raise ValueError(f"relation {r.name!r} references an unknown node type")

    def type_id(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < len(self.node_types):
                raise KeyError(f"no node type with id {name}")
            return int(name)
        for i, t in enumerate(self.node_types):
            if t.name == name:
                return i
        raise KeyError(f"unknown node type {name!r}")

    def relation_id(self, name: str | int) -> int:
        if isinstance(name, (int, np.integer)):
            if not 0 <= name < len(self.relations):
                raise KeyError(f"no relation with id {name}")
            return int(name)
        for i, r in enumerate(self.relations):
            if r.name == name:
                return i
        raise KeyError(f"unknown relation {name!r}")

    def with_count(self, type_id: int, count: int) -> "NetworkSchema":
        types = list(self.node_types)
        t = types[type_id]
        types[type_id] = NodeType(t.name, count, t.attr_dim)
        return NetworkSchema(tuple(types), self.relations)


@dataclass(frozen=True)
class MetaPath:
    """A composite relation: a sequence of (relation id, traversed backwards) steps."""

    steps: tuple[tuple[int, bool], ...]
    start_type: int
    end_type: int

    @classmethod
    def build(cls, schema: NetworkSchema, steps: Sequence[str | int | tuple[str | int, bool]]) -> "MetaPath":
        """Build a path from relation names; a leading ``~`` walks a relation dst -> src."""
        if not steps:
            raise ValueError("a meta-path needs at least one relation")
        resolved = []
        for s in steps:
            if isinstance(s, tuple):
                rid, rev = schema.relation_id(s[0]), bool(s[1])
            elif isinstance(s, str) and s.startswith("~"):
                rid, rev = schema.relation_id(s[1:]), True
            else:
                rid, rev = schema.relation_id(s), False
            resolved.append((rid, rev))
        ends = []
        for rid, rev in resolved:
            r = schema.relations[rid]
            ends.append((r.dst, r.src) if rev else (r.src, r.dst))
        for i in range(len(ends) - 1):
            if ends[i][1] != ends[i + 1][0]:
                a = schema.relations[resolved[i][0]].name
                b = schema.relations[resolved[i + 1][0]].name
                raise ValueError(f"meta-path type mismatch between {a!r} and {b!r}")
        return cls(tuple(resolved), ends[0][0], ends[-1][1])

    def __len__(self):
        return len(self.steps)

    def reversed(self) -> "MetaPath":
        return MetaPath(tuple((r, not rev) for r, rev in reversed(self.steps)), self.end_type, self.start_type)


def make_adjacency(edges: Iterable[tuple[int, int]] | np.ndarray, shape: tuple[int, int]) -> sp.csr_matrix:
    """Binary CSR matrix from an edge list; duplicate edges collapse to one entry."""
    e = np.asarray(edges if not isinstance(edges, np.ndarray) else edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e[:, 0].max() >= shape[0] or e[:, 1].max() >= shape[1]):
        raise ValueError(f"edge index out of bounds for shape {shape}")
    m = sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=shape, dtype=np.float64)
    return binarize(m)


def binarize(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64, copy=True)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.data[:] = 1.0
    m.sort_indices()
    return m


def transpose(m: sp.csr_matrix) -> sp.csr_matrix:
    t = m.T.tocsr()
    t.sort_indices()
    return t


def edge_array(m: sp.spmatrix) -> np.ndarray:
    """(nnz, 2) array of (row, col) pairs in CSR order."""
    m = sp.csr_matrix(m)
    rows = np.repeat(np.arange(m.shape[0]), np.diff(m.indptr))
    return np.stack([rows, m.indices.astype(np.int64)], axis=1)


@dataclass(frozen=True, eq=False)
class HinGraph:
    schema: NetworkSchema
    adjacency: tuple[sp.csr_matrix, ...]
    attributes: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        adj = tuple(binarize(a) for a in self.adjacency)
        object.__setattr__(self, "adjacency", adj)
        if len(adj) != len(self.schema.relations):
            raise ValueError("one adjacency matrix is required per relation")
        for r, a in zip(self.schema.relations, adj):
            want = (self.schema.node_types[r.src].count, self.schema.node_types[r.dst].count)
            if a.shape != want:
                raise ValueError(f"relation {r.name!r}: adjacency shape {a.shape}, expected {want}")
        attrs = {}
        for tid, t in enumerate(self.schema.node_types):
            x = self.attributes.get(tid)
            if t.attr_dim == 0:
                if x is not None:
                    raise ValueError(f"node type {t.name!r} is attributeless but attributes were given")
                continue
            if x is None:
                raise ValueError(f"node type {t.name!r} needs a ({t.count}, {t.attr_dim}) attribute matrix")
            x = np.asarray(x, dtype=np.float64)
            if x.shape != (t.count, t.attr_dim):
                raise ValueError(f"node type {t.name!r}: attributes {x.shape}, expected {(t.count, t.attr_dim)}")
            attrs[tid] = x
        object.__setattr__(self, "attributes", attrs)

    def num_nodes(self, type_id: int | str) -> int:
        return self.schema.node_types[self.schema.type_id(type_id)].count

    @property
    def num_types(self) -> int:
        return len(self.schema.node_types)

    def relation(self, rel: int | str) -> sp.csr_matrix:
        return self.adjacency[self.schema.relation_id(rel)]

    def degrees(self, rel: int | str, side: str = "src") -> np.ndarray:
        a = self.relation(rel)
        return np.diff(a.indptr) if side == "src" else np.diff(transpose(a).indptr)


@dataclass(frozen=True, eq=False)
class LabelSpec:
    target_type: int
    num_classes: int
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    minority_classes: tuple[int, ...] = ()

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        masks = [np.asarray(m, dtype=bool) for m in (self.train_mask, self.val_mask, self.test_mask)]
        for m in masks:
            if m.shape != labels.shape:
                raise ValueError("mask and label shapes differ")
        if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() or (masks[1] & masks[2]).any():
            raise ValueError("train/val/test masks overlap")
        if (labels[masks[0]] == UNLABELED).any():
            raise ValueError("every training node needs a label")
        if ((labels < UNLABELED) | (labels >= self.num_classes)).any():
            raise ValueError("class ids must lie in 0..num_classes-1 (or -1 for unlabeled)")
        minority = tuple(sorted(int(c) for c in self.minority_classes))
        if any(c < 0 or c >= self.num_classes for c in minority):
            raise ValueError("minority classes must be valid class ids")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "train_mask", masks[0])
        object.__setattr__(self, "val_mask", masks[1])
        object.__setattr__(self, "test_mask", masks[2])
        object.__setattr__(self, "minority_classes", minority)

    def class_counts(self, mask: np.ndarray | None = None) -> np.ndarray:
        sel = self.labels if mask is None else self.labels[np.asarray(mask, dtype=bool)]
        sel = sel[sel != UNLABELED]
        return np.bincount(sel, minlength=self.num_classes)

    def members(self, cls: int, mask: np.ndarray | None = None) -> np.ndarray:
        m = self.train_mask if mask is None else np.asarray(mask, dtype=bool)
        return np.flatnonzero(m & (self.labels == cls))


def imbalance_ratio(labels: LabelSpec, scope: np.ndarray | None = None) -> float:
    """Smallest over largest class size among labeled nodes in ``scope`` (default: train)."""
    counts = labels.class_counts(labels.train_mask if scope is None else scope)
    if (counts == 0).any():
        raise DegenerateClassError("degenerate class distribution: a class has no member in scope")
    return float(counts.min() / counts.max())


def _stable(x: float) -> float:
    # guards ceil/floor against products like 0.1 * 30 = 3.0000000000000004
    return round(x, 9)


def split_counts(num_targets: int, num_classes: int, label_rate: float, imb_ratio: float) -> tuple[int, int]:
    majority = math.ceil(_stable(label_rate * num_targets / num_classes))
    minority = math.floor(_stable(imb_ratio * majority))
    return majority, minority


def build_imbalanced_split(
    graph: HinGraph,
    target_type: int | str,
    labels_full: np.ndarray,
    label_rate: float,
    imb_ratio: float,
    minority_classes: Sequence[int],
    seed: int,
    num_classes: int | None = None,
) -> LabelSpec:
    """Sample an imbalanced training set and split the remaining labeled nodes 1:3 into val/test."""
    if not 0 < label_rate <= 1:
        raise ValueError("label_rate must lie in (0, 1]")
    if not 0 < imb_ratio <= 1:
        raise ValueError("imb_ratio must lie in (0, 1]")
    tid = graph.schema.type_id(target_type)
    labels_full = np.asarray(labels_full, dtype=np.int64)
    n = graph.num_nodes(tid)
    if labels_full.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels_full.shape}")
    m = int(num_classes if num_classes is not None else labels_full.max() + 1)
    n_major, n_minor = split_counts(n, m, label_rate, imb_ratio)
    if n_minor < 1:
        raise ValueError(f"imbalance ratio {imb_ratio} leaves minority classes with no training node")
    minority = set(int(c) for c in minority_classes)

    rng = np.random.default_rng(seed)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in range(m):
        pool = np.flatnonzero(labels_full == c)
        want = n_minor if c in minority else n_major
        if want > len(pool):
            raise ValueError(f"class {c}: {want} training nodes requested but only {len(pool)} labeled")
        order = rng.permutation(pool)
        train[order[:want]] = True
        rest = order[want:]
        n_val = int(round(len(rest) / 4))
        val[rest[:n_val]] = True
        test[rest[n_val:]] = True
    return LabelSpec(tid, m, labels_full, train, val, test, tuple(sorted(minority)))


def relation_step_matrix(graph: HinGraph, rid: int, reverse: bool) -> sp.csr_matrix:
    a = graph.adjacency[rid]
    return transpose(a) if reverse else a


def compose_metapath_adjacency(graph: HinGraph, path: MetaPath) -> sp.csr_matrix:
    """Boolean product of the relation matrices along ``path``."""
    out = None
    prev_end = None
    for rid, rev in path.steps:
        r = graph.schema.relations[rid]
        start, end = (r.dst, r.src) if rev else (r.src, r.dst)
        if prev_end is not None and start != prev_end:
            raise ValueError(f"meta-path type mismatch at relation {r.name!r}")
        step = relation_step_matrix(graph, rid, rev)
        out = step.copy() if out is None else binarize(out @ step)
        prev_end = end
    return binarize(out)


@dataclass(frozen=True)
class NeighborSlot:
    """One first-order relation of the target type, seen from the target side.

    A relation linking the target type to itself yields two slots, one per
    orientation.
    """

    name: str
    relation: int
    neighbor_type: int
    target_is_src: bool


def neighbor_slots(schema: NetworkSchema, target_type: int | str) -> list[NeighborSlot]:
    tid = schema.type_id(target_type)
    slots = []
    for rid, r in enumerate(schema.relations):
        if r.src == tid:
            slots.append(NeighborSlot(r.name, rid, r.dst, True))
        if r.dst == tid:
            name = r.name if r.src != tid else "~" + r.name
            slots.append(NeighborSlot(name, rid, r.src, False))
    return slots


def slot_matrix(graph: HinGraph, slot: NeighborSlot) -> sp.csr_matrix:
    """Binary (targets x neighbors) matrix of the slot's relation."""
    a = graph.adjacency[slot.relation]
    return a if slot.target_is_src else transpose(a)


def slot_path(schema: NetworkSchema, slot: NeighborSlot) -> MetaPath:
    """The slot as a one-step meta-path oriented target -> neighbor."""
    return MetaPath.build(schema, [(slot.relation, not slot.target_is_src)])


# ---------------------------------------------------------------------------
# dataset directory format
#
#   schema.json       node types, relations, file names, target type, classes
#   <relation>.edges  "src dst" integer pairs, one per line, '#' comments
#   <type>.attr       dense whitespace-separated rows, one per node
#   labels.txt        "node class" pairs for labeled target nodes
#   split.txt         optional "node train|val|test" pairs
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


@dataclass(eq=False)
class Dataset:
    graph: HinGraph
    target_type: int
    labels: np.ndarray
    num_classes: int
    minority_classes: tuple[int, ...] = ()
    split: LabelSpec | None = None
    meta: dict = field(default_factory=dict)


def _data_lines(path: Path):
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def read_edges(path: Path, shape: tuple[int, int]) -> sp.csr_matrix:
    edges = []
    for lineno, tok in _data_lines(path):
        if len(tok) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected two integers, got {len(tok)} fields")
        try:
            u, v = int(tok[0]), int(tok[1])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer node id") from None
        if not (0 <= u < shape[0] and 0 <= v < shape[1]):
            raise DataFormatError(f"{path}:{lineno}: edge ({u}, {v}) outside {shape[0]}x{shape[1]}")
        edges.append((u, v))
    return make_adjacency(np.array(edges, dtype=np.int64).reshape(-1, 2), shape)


def read_attributes(path: Path, count: int, dim: int) -> np.ndarray:
    rows = []
    for lineno, tok in _data_lines(path):
        if len(tok) != dim:
            raise DataFormatError(f"{path}:{lineno}: expected {dim} values, got {len(tok)}")
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-numeric attribute value") from None
    if len(rows) != count:
        raise DataFormatError(f"{path}:{len(rows)}: expected {count} attribute rows, got {len(rows)}")
    return np.array(rows, dtype=np.float64).reshape(count, dim)


def read_labels(path: Path, n: int, num_classes: int) -> np.ndarray:
    labels = np.full(n, UNLABELED, dtype=np.int64)
    for lineno, tok in _data_lines(path):
        if len(tok) != 2:
            raise DataFormatError(f"{path}:{lineno}: expected 'node class'")
        try:
            v, c = int(tok[0]), int(tok[1])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer field") from None
        if not 0 <= v < n:
            raise DataFormatError(f"{path}:{lineno}: node {v} outside 0..{n - 1}")
        if not 0 <= c < num_classes:
            raise DataFormatError(f"{path}:{lineno}: class {c} outside 0..{num_classes - 1}")
        labels[v] = c
    return labels


def read_split(path: Path, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    masks = {k: np.zeros(n, dtype=bool) for k in ("train", "val", "test")}
    for lineno, tok in _data_lines(path):
        if len(tok) != 2 or tok[1] not in masks:
            raise DataFormatError(f"{path}:{lineno}: expected 'node train|val|test'")
        try:
            v = int(tok[0])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: non-integer node id") from None
        if not 0 <= v < n:
            raise DataFormatError(f"{path}:{lineno}: node {v} outside 0..{n - 1}")
        masks[tok[1]][v] = True
    return masks["train"], masks["val"], masks["test"]


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    try:
        meta = json.loads((root / "schema.json").read_text())
    except FileNotFoundError:
        raise DataFormatError(f"{root / 'schema.json'}: file not found") from None
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{root / 'schema.json'}:{exc.lineno}: {exc.msg}") from None
    try:
        types = tuple(NodeType(t["name"], int(t["count"]), int(t.get("attr_dim", 0))) for t in meta["node_types"])
        names = [t.name for t in types]
        rels = tuple(
            Relation(r["name"], names.index(r["src"]), names.index(r["dst"])) for r in meta["relations"]
        )
        schema = NetworkSchema(types, rels)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"{root / 'schema.json'}: invalid schema ({exc})") from None

    adj = []
    for r, spec in zip(rels, meta["relations"]):
        fname = spec.get("file", f"{r.name}.edges")
        adj.append(read_edges(root / fname, (types[r.src].count, types[r.dst].count)))
    attrs = {}
    for tid, (t, spec) in enumerate(zip(types, meta["node_types"])):
        if t.attr_dim:
            attrs[tid] = read_attributes(root / spec.get("file", f"{t.name}.attr"), t.count, t.attr_dim)
    graph = HinGraph(schema, tuple(adj), attrs)

    target = schema.type_id(meta["target_type"])
    m = int(meta["num_classes"])
    labels = read_labels(root / meta.get("labels_file", "labels.txt"), types[target].count, m)
    minority = tuple(int(c) for c in meta.get("minority_classes", ()))
    split = None
    split_file = meta.get("split_file")
    if split_file:
        tr, va, te = read_split(root / split_file, types[target].count)
        try:
            split = LabelSpec(target, m, labels, tr, va, te, minority)
        except ValueError as exc:
            raise DataFormatError(f"{root / split_file}: {exc}") from None
    return Dataset(graph, target, labels, m, minority, split, meta.get("extra", {}))


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(root: str | Path, ds: Dataset) -> None:
    """Write ``ds`` in the directory format read by :func:`load_dataset` (bit-exact floats)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    g = ds.graph
    schema = g.schema
    meta = {
        "format_version": FORMAT_VERSION,
        "node_types": [],
        "relations": [],
        "target_type": schema.node_types[ds.target_type].name,
        "num_classes": int(ds.num_classes),
        "minority_classes": [int(c) for c in ds.minority_classes],
        "labels_file": "labels.txt",
    }
    for tid, t in enumerate(schema.node_types):
        entry = {"name": t.name, "count": t.count, "attr_dim": t.attr_dim}
        if t.attr_dim:
            entry["file"] = f"{t.name}.attr"
            with open(root / entry["file"], "w") as fh:
                for row in g.attributes[tid]:
                    fh.write(" ".join(_fmt(v) for v in row) + "\n")
        meta["node_types"].append(entry)
    for rid, r in enumerate(schema.relations):
        fname = f"{r.name}.edges"
        meta["relations"].append(
            {"name": r.name, "src": schema.node_types[r.src].name, "dst": schema.node_types[r.dst].name, "file": fname}
        )
        with open(root / fname, "w") as fh:
            fh.write(f"# {r.name}: {schema.node_types[r.src].name} -> {schema.node_types[r.dst].name}\n")
            for u, v in edge_array(g.adjacency[rid]):
                fh.write(f"{u} {v}\n")
    with open(root / "labels.txt", "w") as fh:
        for v, c in enumerate(ds.labels):
            if c != UNLABELED:
                fh.write(f"{v} {int(c)}\n")
    if ds.split is not None:
        meta["split_file"] = "split.txt"
        with open(root / "split.txt", "w") as fh:
            for name, mask in (("train", ds.split.train_mask), ("val", ds.split.val_mask), ("test", ds.split.test_mask)):
                for v in np.flatnonzero(mask):
                    fh.write(f"{v} {name}\n")
    if ds.meta:
        meta["extra"] = ds.meta
    (root / "schema.json").write_text(json.dumps(meta, indent=2) + "\n")
