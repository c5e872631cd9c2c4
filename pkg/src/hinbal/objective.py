"""Training objective: cross-entropy, semantic link loss and prototype loss.

All terms return their value together with gradients w.r.t. their direct
inputs; :func:`compute_objective` chains them through the projection heads
and the encoder to produce parameter and input-attribute gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .encoder import ModelState, backward, forward, head_backward, head_forward
from .hin import HinGraph, LabelSpec, NeighborSlot, neighbor_slots, slot_matrix


class NoSyntheticNodesWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    temperature: float = 1.0
    negative_sampling: bool = False
    normalize: bool = False  # unit-length projections (cosine scores); keeps the auxiliary terms from saturating

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossBreakdown:
    cla: float = 0.0
    sem: float = 0.0
    e: float = 0.0
    o: float = 0.0
    pro: float = 0.0
    total: float = 0.0
    sem_per_slot: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"L_cla": self.cla, "L_sem": self.sem, "L_e": self.e, "L_o": self.o, "L_pro": self.pro, "L_total": self.total}


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def classification_loss(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over ``mask``; gradient w.r.t. all logits rows."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("classification loss over an empty mask")
    y = np.asarray(labels)[idx]
    logp = _log_softmax(logits[idx])
    value = -logp[np.arange(idx.size), y].mean()
    d = np.exp(logp)
    d[np.arange(idx.size), y] -= 1.0
    grad = np.zeros_like(logits)
    grad[idx] = d / idx.size
    return float(value), grad


def semantic_slot_loss(
    p_target: np.ndarray,
    p_neighbor: np.ndarray,
    adjacency: sp.csr_matrix,
    neighbor_set: np.ndarray,
    negatives: np.ndarray | None = None,
    edges: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Link loss of one neighbor slot, returning (value, d p_target, d p_neighbor).

    ``adjacency`` is the (all targets x neighbors) augmented matrix; only
    columns in ``neighbor_set`` (neighbors of synthetic nodes) take part and
    the sum is scaled by ``1 / (n_targets * |neighbor_set|)``. ``negatives``
    holds optional (target, neighbor) non-edges scored with ``-log sigma(-s)``.
    ``edges`` may carry the precomputed (rows, cols) of that column restriction.
    """
    dpt = np.zeros_like(p_target)
    dpk = np.zeros_like(p_neighbor)
    neighbor_set = np.asarray(neighbor_set, dtype=np.int64)
    if neighbor_set.size == 0:
        return 0.0, dpt, dpk
    scale = 1.0 / (adjacency.shape[0] * neighbor_set.size)
    rows, cols = edges if edges is not None else _restricted_edges(adjacency, neighbor_set)
    s = np.einsum("ij,ij->i", p_target[rows], p_neighbor[cols])
    value = scale * np.logaddexp(0.0, -s).sum()
    coef = -scale * np.exp(-np.logaddexp(0.0, s))  # d/ds of -log sigma(s) = -sigma(-s)
    np.add.at(dpt, rows, coef[:, None] * p_neighbor[cols])
    np.add.at(dpk, cols, coef[:, None] * p_target[rows])
    if negatives is not None and len(negatives):
        nr, nc = negatives[:, 0], negatives[:, 1]
        sn = np.einsum("ij,ij->i", p_target[nr], p_neighbor[nc])
        value += scale * np.logaddexp(0.0, sn).sum()
        cn = scale * np.exp(-np.logaddexp(0.0, -sn))  # sigma(s)
        np.add.at(dpt, nr, cn[:, None] * p_neighbor[nc])
        np.add.at(dpk, nc, cn[:, None] * p_target[nr])
    return float(value), dpt, dpk


def _restricted_edges(adjacency: sp.csr_matrix, neighbor_set: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sub = adjacency.tocsc()[:, neighbor_set].tocoo()
    return sub.row.astype(np.int64), neighbor_set[sub.col]


def semantic_embedding(q_target: np.ndarray, q_neighbors: list[np.ndarray], mean_ops: list[sp.csr_matrix]) -> np.ndarray:
    """Own projection plus per-slot neighbor-mean projections, divided by ``1 + #slots``.

    ``mean_ops[s]`` row-normalizes slot ``s``'s (targets x neighbors) matrix;
    targets without neighbors in a slot get a zero contribution from it.
    """
    g = q_target.copy()
    for op, q in zip(mean_ops, q_neighbors):
        g += op @ q
    return g / (1.0 + len(mean_ops))


def _prototype_term(x, protos, members_of, syn_rows, syn_classes, classes, temperature):
    """One domain of the prototype loss: value, dx (including the prototype path)."""
    dx = np.zeros_like(x)
    active = [c for c in classes if np.any(syn_classes == c)]
    if not active:
        return 0.0, dx
    logits = x[syn_rows] @ protos.T / temperature
    logp = _log_softmax(logits)
    weights = np.zeros(len(syn_rows))
    value = 0.0
    for c in active:
        sel = syn_classes == c
        w = 1.0 / (len(active) * sel.sum())
        weights[sel] = w
        value -= w * logp[sel, c].sum()
    d = np.exp(logp)
    d[np.arange(len(syn_rows)), syn_classes] -= 1.0
    d *= weights[:, None]
    np.add.at(dx, syn_rows, d @ protos / temperature)
    dprotos = d.T @ x[syn_rows] / temperature
    for j, mem in enumerate(members_of):
        dx[mem] += dprotos[j] / len(mem)
    return float(value), dx


def class_prototypes(x: np.ndarray, members_of: list[np.ndarray]) -> np.ndarray:
    # shifted mean: exact when all members share one embedding
    return np.stack([x[mem[0]] + (x[mem] - x[mem[0]]).mean(axis=0) for mem in members_of])


def prototype_loss(
    q_target: np.ndarray,
    g_target: np.ndarray,
    labels: np.ndarray,
    real_train_mask: np.ndarray,
    synthetic_ids: np.ndarray,
    synthetic_classes: np.ndarray,
    minority_classes,
    num_classes: int,
    temperature: float,
) -> tuple[float, float, float, np.ndarray, np.ndarray]:
    """Prototype loss in the target and semantic domains.

    Prototypes are class means over labeled real training nodes and stay in
    the differentiation graph. Returns ``(L_pro, L_e, L_o, dq, dg)``.
    """
    members_of = [np.flatnonzero(real_train_mask & (labels == j)) for j in range(num_classes)]
    for j, mem in enumerate(members_of):
        if mem.size == 0:
            raise ValueError(f"class {j} has no labeled real training node to form a prototype")
    for c in minority_classes:
        if not np.any(synthetic_classes == c):
            warnings.warn(f"minority class {c} has no synthetic node; skipped in prototype loss",
                          NoSyntheticNodesWarning, stacklevel=2)
    syn_rows = np.asarray(synthetic_ids, dtype=np.int64)
    syn_classes = np.asarray(synthetic_classes, dtype=np.int64)
    e = class_prototypes(q_target, members_of)
    o = class_prototypes(g_target, members_of)
    l_e, dq = _prototype_term(q_target, e, members_of, syn_rows, syn_classes, minority_classes, temperature)
    l_o, dg = _prototype_term(g_target, o, members_of, syn_rows, syn_classes, minority_classes, temperature)
    return 0.5 * (l_e + l_o), l_e, l_o, 0.5 * dq, 0.5 * dg


def total_loss(cla: float, sem: float, pro: float, cfg: LossConfig, **parts) -> LossBreakdown:
    out = LossBreakdown(cla=cla, sem=sem, pro=pro, **parts)
    out.total = cla + cfg.lambda1 * sem + cfg.lambda2 * pro
    return out


# --- full objective -----------------------------------------------------------


def _project(state: ModelState, head: str, t: int, z: np.ndarray, normalize: bool):
    out, cache = head_forward(state, head, t, z)
    if not normalize:
        return out, (cache, None)
    norm = np.sqrt((out * out).sum(axis=1, keepdims=True) + 1e-12)
    unit = out / norm
    return unit, (cache, (unit, norm))


def _project_backward(state: ModelState, cache, dout: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
    head_cache, unit_cache = cache
    if unit_cache is not None:
        unit, norm = unit_cache
        dout = (dout - unit * (unit * dout).sum(axis=1, keepdims=True)) / norm
    return head_backward(state, head_cache, dout, grads)


def _row_normalize(a: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.diff(a.indptr).astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return (sp.diags(inv) @ a).tocsr()


@dataclass(eq=False)
class ObjectiveContext:
    """Everything about the augmented graph the losses need, precomputed once."""

    target_type: int
    num_classes: int
    labels: np.ndarray  # augmented, -1 for unlabeled
    train_mask: np.ndarray  # real train + synthetic
    real_train_mask: np.ndarray
    synthetic_ids: np.ndarray
    synthetic_classes: np.ndarray
    minority_classes: tuple[int, ...]
    slots: list[NeighborSlot]
    slot_mats: list[sp.csr_matrix]  # (targets x neighbors), augmented
    mean_ops: list[sp.csr_matrix]
    neighbor_sets: list[np.ndarray]  # 1-hop neighbors of synthetic nodes per slot
    negatives: list[np.ndarray | None] | None = None
    slot_edges: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if not self.slot_edges:
            self.slot_edges = [_restricted_edges(m, s) for m, s in zip(self.slot_mats, self.neighbor_sets)]

    @classmethod
    def build(cls, aug_graph: HinGraph, aug_labels: LabelSpec, base_count: int) -> "ObjectiveContext":
        tid = aug_labels.target_type
        n = aug_graph.num_nodes(tid)
        syn = np.arange(base_count, n)
        slots = neighbor_slots(aug_graph.schema, tid)
        mats = [slot_matrix(aug_graph, s) for s in slots]
        nsets = [np.unique(m[syn].indices).astype(np.int64) for m in mats]
        real_train = aug_labels.train_mask.copy()
        real_train[base_count:] = False
        return cls(
            tid, aug_labels.num_classes, aug_labels.labels, aug_labels.train_mask, real_train,
            syn, aug_labels.labels[syn], aug_labels.minority_classes,
            slots, mats, [_row_normalize(m) for m in mats], nsets,
        )

    @property
    def has_synthetic(self) -> bool:
        return self.synthetic_ids.size > 0

    def sample_negatives(self, rng: np.random.Generator) -> list[np.ndarray]:
        """One uniformly drawn non-edge inside the synthetic-neighbor set per positive edge."""
        out = []
        for m, nset, (rows, _) in zip(self.slot_mats, self.neighbor_sets, self.slot_edges):
            if nset.size == 0:
                out.append(np.zeros((0, 2), dtype=np.int64))
                continue
            cols = nset[rng.integers(nset.size, size=rows.size)]
            keep = np.asarray(m[rows, cols]).ravel() == 0
            out.append(np.stack([rows[keep], cols[keep]], axis=1))
        return out


def semantic_loss(
    z: dict[int, np.ndarray],
    state: ModelState,
    ctx: ObjectiveContext,
    grads: dict[str, np.ndarray] | None = None,
    normalize: bool = False,
) -> tuple[float, dict[str, float], dict[int, np.ndarray]]:
    """Sum over neighbor slots of the link loss on synthetic-node neighborhoods.

    Returns (value, per-slot values, gradient w.r.t. z per type); head
    gradients accumulate into ``grads`` when given.
    """
    dz = {t: np.zeros_like(v) for t, v in z.items()}
    if not ctx.has_synthetic:
        warnings.warn("no synthetic nodes: semantic loss is zero", NoSyntheticNodesWarning, stacklevel=2)
        return 0.0, {s.name: 0.0 for s in ctx.slots}, dz
    tt = ctx.target_type
    types = sorted({tt} | {s.neighbor_type for s in ctx.slots})
    proj = {t: _project(state, "sem", t, z[t], normalize) for t in types}
    dp = {t: np.zeros_like(proj[t][0]) for t in types}
    total = 0.0
    per = {}
    for i, (slot, mat, nset) in enumerate(zip(ctx.slots, ctx.slot_mats, ctx.neighbor_sets)):
        neg = ctx.negatives[i] if ctx.negatives is not None else None
        val, dpt, dpk = semantic_slot_loss(proj[tt][0], proj[slot.neighbor_type][0], mat, nset, neg, ctx.slot_edges[i])
        per[slot.name] = val
        total += val
        dp[tt] += dpt
        dp[slot.neighbor_type] += dpk
    if grads is not None:
        for t in types:
            dz[t] += _project_backward(state, proj[t][1], dp[t], grads)
    return total, per, dz


def compute_objective(
    graph: HinGraph,
    state: ModelState,
    ctx: ObjectiveContext,
    cfg: LossConfig,
    attributes: dict[int, np.ndarray] | None = None,
    plan=None,
    with_grads: bool = True,
    terms: tuple[str, ...] = ("cla", "sem", "pro"),
):
    """Loss breakdown and, with ``with_grads``, gradients of the weighted total.

    ``terms`` restricts which terms enter the total (used by gradient checks
    of a single term at unit weight). Returns ``(breakdown, grads, dx, logits)``.
    """
    z, logits, tape = forward(graph, state, attributes, plan)
    grads = state.zeros_like() if with_grads else None
    tt = ctx.target_type
    w_sem = cfg.lambda1 if "sem" in terms else 0.0
    w_pro = cfg.lambda2 if "pro" in terms else 0.0
    dz = {t: np.zeros_like(v) for t, v in z.items()}

    cla, dlogits = classification_loss(logits, ctx.labels, ctx.train_mask)
    if "cla" not in terms:
        dlogits = np.zeros_like(dlogits)

    sem, per_slot = 0.0, {s.name: 0.0 for s in ctx.slots}
    if ctx.has_synthetic and ctx.slots:
        sub = state.zeros_like() if with_grads else None
        sem, per_slot, dz_sem = semantic_loss(z, state, ctx, sub, cfg.normalize)
        if with_grads and w_sem:
            for k in grads:
                grads[k] += w_sem * sub[k]
            for t in dz:
                dz[t] += w_sem * dz_sem[t]

    pro = l_e = l_o = 0.0
    if ctx.has_synthetic:
        types = sorted({tt} | {s.neighbor_type for s in ctx.slots})
        proj = {t: _project(state, "pro", t, z[t], cfg.normalize) for t in types}
        q_t = proj[tt][0]
        g = semantic_embedding(q_t, [proj[s.neighbor_type][0] for s in ctx.slots], ctx.mean_ops)
        pro, l_e, l_o, dq, dg = prototype_loss(
            q_t, g, ctx.labels, ctx.real_train_mask, ctx.synthetic_ids, ctx.synthetic_classes,
            ctx.minority_classes, ctx.num_classes, cfg.temperature,
        )
        if with_grads and w_pro:
            dproj = {t: np.zeros_like(proj[t][0]) for t in types}
            dproj[tt] += dq
            scale = 1.0 / (1.0 + len(ctx.slots))
            dproj[tt] += scale * dg
            for s, op in zip(ctx.slots, ctx.mean_ops):
                dproj[s.neighbor_type] += scale * (op.T @ dg)
            sub = state.zeros_like()
            for t in types:
                dz[t] += w_pro * _project_backward(state, proj[t][1], dproj[t], sub)
            for k in grads:
                grads[k] += w_pro * sub[k]

    breakdown = total_loss(cla, sem, pro, cfg, e=l_e, o=l_o, sem_per_slot=per_slot)
    if "cla" not in terms or w_sem != cfg.lambda1 or w_pro != cfg.lambda2:
        breakdown.total = (cla if "cla" in terms else 0.0) + w_sem * sem + w_pro * pro
    if not with_grads:
        return breakdown, None, None, logits
    grads, dx = backward(tape, state, dz, dlogits, grads)
    return breakdown, grads, dx, logits
