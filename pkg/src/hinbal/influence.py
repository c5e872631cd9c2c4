"""Personalized PageRank influence of neighbor nodes on minority target classes.

For a neighbor type and the target type, the bipartite relation (or a
composed meta-path) is made symmetric, normalized by ``D^-1/2 M D^-1/2``
and fed to PPR. Summing the PPR mass that links each neighbor node with the
training members of a minority class gives that node's influence score; the
top ``ceil(mu * d_max)`` scorers become the candidate neighbors of synthetic
nodes of that class.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .hin import (
    HinGraph,
    LabelSpec,
    MetaPath,
    NeighborSlot,
    compose_metapath_adjacency,
    neighbor_slots,
    slot_matrix,
    slot_path,
)

ALL = "ALL"


class PprConvergenceWarning(RuntimeWarning):
    pass


class ZeroInfluenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PprConfig:
    alpha: float = 0.15
    max_iters: int = 200
    tol: float = 1e-8

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass(eq=False)
class PprResult:
    matrix: np.ndarray
    iterations: int
    converged: bool
    residual: float


@dataclass(eq=False)
class InfluenceTable:
    neighbor_type: int
    minority_class: int
    scores: np.ndarray
    candidates: np.ndarray  # ascending node ids
    k_used: int
    slot: str = ""
    degenerate: bool = False  # all-zero scores: candidates fell back to the lowest ids


def bidirectional_from_bipartite(b: sp.spmatrix) -> sp.csr_matrix:
    """Symmetric-normalized ``[[0, B^T], [B, 0]]`` for a (targets x neighbors) matrix ``B``.

    Neighbor nodes occupy the first block, target nodes the second.
    """
    b = sp.csr_matrix(b, dtype=np.float64)
    n_t, n_k = b.shape
    m = sp.bmat([[None, b.T], [b, None]], format="csr")
    if m.shape != (n_k + n_t, n_k + n_t):  # bmat drops empty blocks' shapes when nnz is 0
        m = sp.csr_matrix((n_k + n_t, n_k + n_t))
    deg = np.asarray(m.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv)
    out = (d @ m @ d).tocsr()
    out.sort_indices()
    return out


def bidirectional_normalized(graph: HinGraph, relation: int | str, target_type: int | str) -> sp.csr_matrix:
    """Normalized bidirectional matrix of one relation between a neighbor type and the target type."""
    rid = graph.schema.relation_id(relation)
    tid = graph.schema.type_id(target_type)
    r = graph.schema.relations[rid]
    a = graph.adjacency[rid]
    if r.dst == tid:
        b = a.T
    elif r.src == tid:
        b = a
    else:
        raise ValueError(f"relation {r.name!r} does not touch the target type")
    return bidirectional_from_bipartite(b)


def ppr(
    a_tilde,
    cfg: PprConfig = PprConfig(),
    seeds: Sequence[int] | np.ndarray | None = None,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> PprResult:
    """``alpha * (I - (1 - alpha) A)^-1`` by summing its Neumann series.

    With ``seeds`` only those columns of the result are computed. Iteration
    stops once the L1 norm of the newest series term drops below ``cfg.tol``;
    hitting ``cfg.max_iters`` first sets ``converged=False`` and warns.
    ``callback(k, partial_sum)`` sees every partial sum.
    """
    shape = a_tilde.shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"PPR needs a square matrix, got shape {shape}")
    n = shape[0]
    a = sp.csr_matrix(a_tilde, dtype=np.float64) if sp.issparse(a_tilde) else np.asarray(a_tilde, dtype=np.float64)
    cols = np.arange(n) if seeds is None else np.asarray(seeds, dtype=np.int64)
    term = np.zeros((n, len(cols)))
    term[cols, np.arange(len(cols))] = cfg.alpha
    total = term.copy()
    if callback is not None:
        callback(0, total)
    decay = 1.0 - cfg.alpha
    residual = 0.0 if decay == 0.0 else float(np.abs(term).sum())
    it = 0
    converged = residual < cfg.tol
    while not converged and it < cfg.max_iters:
        it += 1
        term = decay * (a @ term)
        total += term
        if callback is not None:
            callback(it, total)
        residual = float(np.abs(term).sum())
        converged = residual < cfg.tol
    if not converged:
        warnings.warn(
            f"PPR did not converge in {cfg.max_iters} iterations (last term L1 {residual:.3e})",
            PprConvergenceWarning,
            stacklevel=2,
        )
    return PprResult(total, it, converged, residual)


def _oriented_bipartite(graph: HinGraph, path: MetaPath, target_type: int, neighbor_type: int) -> sp.csr_matrix:
    if path.start_type == target_type and path.end_type == neighbor_type:
        return compose_metapath_adjacency(graph, path)
    if path.start_type == neighbor_type and path.end_type == target_type:
        return compose_metapath_adjacency(graph, path.reversed())
    raise ValueError(
        f"meta-path endpoints ({path.start_type}, {path.end_type}) do not connect types {neighbor_type} and {target_type}"
    )


def aggregate_influence(
    graph: HinGraph,
    target_type: int | str,
    neighbor_type: int | str,
    paths: Sequence[MetaPath] | None = None,
    cfg: PprConfig = PprConfig(),
    columns: Sequence[int] | np.ndarray | None = None,
) -> np.ndarray:
    """Summed PPR influence over ``paths``, as a (neighbors x targets) block.

    ``columns`` restricts the target axis to the given target ids. Paths are
    summed in list order.
    """
    tid = graph.schema.type_id(target_type)
    kid = graph.schema.type_id(neighbor_type)
    if paths is None:
        paths = [slot_path(graph.schema, s) for s in neighbor_slots(graph.schema, tid) if s.neighbor_type == kid]
    if not paths:
        raise ValueError("no meta-path connects the neighbor type with the target type")
    n_k = graph.num_nodes(kid)
    n_t = graph.num_nodes(tid)
    cols = np.arange(n_t) if columns is None else np.asarray(columns, dtype=np.int64)
    total = np.zeros((n_k, len(cols)))
    for path in paths:
        b = _oriented_bipartite(graph, path, tid, kid)
        a = bidirectional_from_bipartite(b)
        res = ppr(a, cfg, seeds=n_k + cols)
        # symmetric normalization makes PPR symmetric, so the (target column, neighbor row)
        # block equals the transpose of the (target row, neighbor column) block
        total += res.matrix[:n_k, :]
    return total


def minority_influence(pi_block: np.ndarray, members: Sequence[int] | np.ndarray) -> np.ndarray:
    """Influence score of every neighbor node on the given minority members.

    ``pi_block`` is the (neighbors x targets) block from :func:`aggregate_influence`.
    """
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        raise ValueError("minority member set is empty")
    return np.asarray(pi_block)[:, members].sum(axis=1)


def candidate_count(mu, d_max: int, n: int) -> int:
    if isinstance(mu, str):
        if mu.upper() != ALL:
            raise ValueError(f"mu must be positive or {ALL!r}, got {mu!r}")
        return n
    if not mu > 0:
        raise ValueError("mu must be positive")
    if d_max < 1:
        raise ValueError("d_max must be at least 1")
    return min(math.ceil(round(mu * d_max, 9)), n)


def rank_by_score(scores: np.ndarray) -> np.ndarray:
    """Node ids by descending score, lower id first among ties."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def select_candidates(
    scores: np.ndarray,
    mu,
    d_max: int,
    neighbor_type: int = -1,
    minority_class: int = -1,
    slot: str = "",
) -> InfluenceTable:
    scores = np.asarray(scores, dtype=np.float64)
    k = candidate_count(mu, d_max, len(scores))
    degenerate = bool(len(scores)) and not np.any(scores > 0)
    if degenerate:
        warnings.warn(
            f"all influence scores are zero for class {minority_class} / {slot or neighbor_type}; "
            "consider adding meta-paths",
            ZeroInfluenceWarning,
            stacklevel=2,
        )
    top = np.sort(rank_by_score(scores)[:k])
    return InfluenceTable(neighbor_type, minority_class, scores, top, k, slot, degenerate)


CANDIDATE_MODES = ("influence", "random", "minority")


def minority_degree_max(b: sp.csr_matrix, members: np.ndarray) -> int:
    deg = np.diff(b.indptr)[members]
    return int(deg.max()) if deg.size else 0


def build_influence_tables(
    graph: HinGraph,
    labels: LabelSpec,
    mu=5,
    cfg: PprConfig = PprConfig(),
    meta_paths: Mapping[str, Sequence[MetaPath]] | None = None,
    mode: str = "influence",
) -> dict[tuple[int, str], InfluenceTable]:
    """Influence tables for every (minority class, neighbor slot) pair.

    Only training-mask members of each minority class are used. ``mode``
    switches candidate construction: ``"influence"`` ranks by PPR influence,
    ``"random"`` admits every node of the neighbor type, ``"minority"`` admits
    only nodes already linked to the class's training members.
    """
    if mode not in CANDIDATE_MODES:
        raise ValueError(f"unknown candidate mode {mode!r}")
    tid = labels.target_type
    slots = neighbor_slots(graph.schema, tid)
    members = {c: labels.members(c) for c in labels.minority_classes}
    for c, mem in members.items():
        if mem.size == 0:
            raise ValueError(f"minority class {c} has no training member")
    union = np.unique(np.concatenate([m for m in members.values()])) if members else np.array([], dtype=np.int64)
    position = {int(v): i for i, v in enumerate(union)}

    tables = {}
    for slot in slots:
        b = slot_matrix(graph, slot)
        n_k = b.shape[1]
        block = None
        if mode == "influence" and union.size:
            paths = list((meta_paths or {}).get(slot.name, [])) or [slot_path(graph.schema, slot)]
            block = _slot_influence(graph, tid, slot, paths, cfg, union)
        for c, mem in members.items():
            d_max = max(minority_degree_max(b, mem), 1)
            if mode == "influence":
                scores = minority_influence(block, [position[int(v)] for v in mem])
                tables[(c, slot.name)] = select_candidates(scores, mu, d_max, slot.neighbor_type, c, slot.name)
            elif mode == "random":
                tables[(c, slot.name)] = InfluenceTable(
                    slot.neighbor_type, c, np.ones(n_k), np.arange(n_k), n_k, slot.name
                )
            else:
                linked = np.unique(b[mem].indices)
                degenerate = linked.size == 0
                cand = linked if not degenerate else np.arange(min(d_max, n_k))
                scores = np.zeros(n_k)
                scores[linked] = 1.0
                tables[(c, slot.name)] = InfluenceTable(
                    slot.neighbor_type, c, scores, cand, len(cand), slot.name, degenerate
                )
    return tables


def _slot_influence(graph, tid: int, slot: NeighborSlot, paths, cfg, columns) -> np.ndarray:
    if slot.neighbor_type != tid:
        return aggregate_influence(graph, tid, slot.neighbor_type, paths, cfg, columns=columns)
    # self-relation: keep the slot's own orientation instead of guessing from endpoint types
    n = graph.num_nodes(tid)
    total = np.zeros((n, len(columns)))
    for path in paths:
        a = bidirectional_from_bipartite(compose_metapath_adjacency(graph, path))
        total += ppr(a, cfg, seeds=n + np.asarray(columns)).matrix[:n, :]
    return total


def write_influence_tables(out: str | Path, tables: Mapping[tuple[int, str], InfluenceTable], graph: HinGraph) -> None:
    """One text file per (class, slot): ``node score is_candidate`` rows."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for (c, slot), t in sorted(tables.items()):
        safe = slot.replace("~", "rev_")
        cand = np.zeros(len(t.scores), dtype=bool)
        cand[t.candidates] = True
        with open(out / f"class{c}_{safe}.txt", "w") as fh:
            fh.write(f"# class {c}, slot {slot}, neighbor type {graph.schema.node_types[t.neighbor_type].name}\n")
            fh.write(f"# k_used {t.k_used}, degenerate {int(t.degenerate)}\n")
            for v, (s, flag) in enumerate(zip(t.scores, cand)):
                fh.write(f"{v} {s!r} {int(flag)}\n")
