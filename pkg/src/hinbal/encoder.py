"""Two-layer relation-aware message passing encoder with hand-written backward pass.

Every relation is used in both directions ("channels"). A node's layer output
is ``relu(h W_self + b + mean_over_incoming_channels(N_c h_src W_c))`` where
``N_c`` row-normalizes the channel's adjacency by receiver in-degree. The
parameter set also carries the classifier head and two families of
type-specific projection heads used by the auxiliary losses.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .hin import HinGraph, transpose

CHECKPOINT_VERSION = 1
NUM_LAYERS = 2


class StaleTapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    embed_dim: int = 32
    proj_dim: int = 16
    init_scale: float | None = None  # None: 1/sqrt(fan_in) per tensor
    seed: int = 0

    def __post_init__(self):
        for k in ("hidden_dim", "embed_dim", "proj_dim"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")


@dataclass(frozen=True)
class Channel:
    name: str
    relation: int
    src: int  # sending type
    dst: int  # receiving type
    norm: sp.csr_matrix  # (receivers x senders), rows sum to 1 or 0
    norm_t: sp.csr_matrix


@dataclass(frozen=True)
class MessagePlan:
    counts: tuple[int, ...]
    channels: tuple[Channel, ...]
    fan_in: tuple[int, ...]  # incoming channel count per type


def _row_normalize(a: sp.csr_matrix) -> sp.csr_matrix:
    deg = np.diff(a.indptr).astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    out = (sp.diags(inv) @ a).tocsr()
    out.sort_indices()
    return out


def build_plan(graph: HinGraph) -> MessagePlan:
    chans = []
    for rid, r in enumerate(graph.schema.relations):
        a = graph.adjacency[rid]
        fwd = _row_normalize(transpose(a))
        rev = _row_normalize(a)
        chans.append(Channel(r.name, rid, r.src, r.dst, fwd, transpose(fwd)))
        chans.append(Channel(r.name + "~", rid, r.dst, r.src, rev, transpose(rev)))
    counts = tuple(t.count for t in graph.schema.node_types)
    fan_in = tuple(sum(1 for c in chans if c.dst == t) for t in range(len(counts)))
    return MessagePlan(counts, tuple(chans), fan_in)


@dataclass(eq=False)
class ModelState:
    config: ModelConfig
    type_names: tuple[str, ...]
    attr_dims: tuple[int, ...]
    counts: tuple[int, ...]  # node counts the embedding tables were sized for
    target_type: int
    num_classes: int
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    version: int = 0

    def copy(self) -> "ModelState":
        return ModelState(
            self.config, self.type_names, self.attr_dims, self.counts, self.target_type, self.num_classes,
            {k: p.copy() for k, p in self.params.items()},
            {k: p.copy() for k, p in self.m.items()},
            {k: p.copy() for k, p in self.v.items()},
            self.t, self.version,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}


def param_shapes(graph: HinGraph, target_type: int, num_classes: int, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    names = [t.name for t in graph.schema.node_types]
    dims = [cfg.hidden_dim, cfg.hidden_dim, cfg.embed_dim]
    for t in graph.schema.node_types:
        if t.attr_dim:
            shapes[f"in.{t.name}.W"] = (t.attr_dim, cfg.hidden_dim)
            shapes[f"in.{t.name}.b"] = (cfg.hidden_dim,)
        else:
            shapes[f"in.{t.name}.E"] = (t.count, cfg.hidden_dim)
    for layer in range(1, NUM_LAYERS + 1):
        din, dout = dims[layer - 1], dims[layer]
        for n in names:
            shapes[f"l{layer}.self.{n}"] = (din, dout)
            shapes[f"l{layer}.bias.{n}"] = (dout,)
        for r in graph.schema.relations:
            shapes[f"l{layer}.msg.{r.name}"] = (din, dout)
            shapes[f"l{layer}.msg.{r.name}~"] = (din, dout)
    shapes["cls.W"] = (cfg.embed_dim, num_classes)
    shapes["cls.b"] = (num_classes,)
    for head in ("sem", "pro"):
        for n in names:
            shapes[f"{head}.{n}.W1"] = (cfg.embed_dim, cfg.embed_dim)
            shapes[f"{head}.{n}.b1"] = (cfg.embed_dim,)
            shapes[f"{head}.{n}.W2"] = (cfg.embed_dim, cfg.proj_dim)
            shapes[f"{head}.{n}.b2"] = (cfg.proj_dim,)
    return shapes


def init_state(graph: HinGraph, target_type: int, num_classes: int, cfg: ModelConfig = ModelConfig()) -> ModelState:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in) unless ``cfg.init_scale`` is set; zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(graph, target_type, num_classes, cfg).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[1] if name.endswith(".E") else shape[0]
        s = cfg.init_scale if cfg.init_scale is not None else 1.0 / math.sqrt(fan_in)
        params[name] = rng.uniform(-s, s, size=shape)
    return ModelState(
        cfg,
        tuple(t.name for t in graph.schema.node_types),
        tuple(t.attr_dim for t in graph.schema.node_types),
        tuple(t.count for t in graph.schema.node_types),
        int(target_type),
        int(num_classes),
        params,
        {k: np.zeros_like(p) for k, p in params.items()},
        {k: np.zeros_like(p) for k, p in params.items()},
    )


@dataclass(eq=False)
class ForwardTape:
    plan: MessagePlan
    inputs: dict[int, np.ndarray]
    hs: list[dict[int, np.ndarray]]  # h^0, h^1, h^2 per type
    pres: list[dict[int, np.ndarray]]  # pre-activations of layers 1, 2
    msgs: list[dict[str, np.ndarray]]  # N_c h_src per channel, layers 1, 2
    state_version: int
    state_id: int

    @property
    def z(self) -> dict[int, np.ndarray]:
        return self.hs[-1]


def _relu(x):
    return np.maximum(x, 0.0)


def forward(
    graph: HinGraph,
    state: ModelState,
    attributes: dict[int, np.ndarray] | None = None,
    plan: MessagePlan | None = None,
) -> tuple[dict[int, np.ndarray], np.ndarray, ForwardTape]:
    """Embeddings ``z`` per type, target-type logits, and the tape for :func:`backward`.

    ``attributes`` overrides the graph's attribute matrices per type id.
    """
    plan = plan or build_plan(graph)
    p = state.params
    names = state.type_names
    counts = plan.counts
    if len(counts) != len(names):
        raise ValueError("graph and model disagree on the number of node types")
    xs: dict[int, np.ndarray] = {}
    h0: dict[int, np.ndarray] = {}
    for t, name in enumerate(names):
        if state.attr_dims[t]:
            x = (attributes or {}).get(t, graph.attributes.get(t))
            if x is None or x.shape != (counts[t], state.attr_dims[t]):
                got = None if x is None else x.shape
                raise ValueError(f"type {name!r}: attributes {got}, expected {(counts[t], state.attr_dims[t])}")
            xs[t] = x
            h0[t] = x @ p[f"in.{name}.W"] + p[f"in.{name}.b"]
        else:
            e = p[f"in.{name}.E"]
            if e.shape[0] != counts[t]:
                raise ValueError(f"type {name!r}: embedding table has {e.shape[0]} rows, graph has {counts[t]} nodes")
            h0[t] = e
    hs = [h0]
    pres, msgs = [], []
    for layer in range(1, NUM_LAYERS + 1):
        prev = hs[-1]
        pre = {t: prev[t] @ p[f"l{layer}.self.{n}"] + p[f"l{layer}.bias.{n}"] for t, n in enumerate(names)}
        msg = {}
        for c in plan.channels:
            m = c.norm @ prev[c.src]
            msg[c.name] = m
            pre[c.dst] = pre[c.dst] + (m @ p[f"l{layer}.msg.{c.name}"]) / plan.fan_in[c.dst]
        pres.append(pre)
        msgs.append(msg)
        hs.append({t: _relu(a) for t, a in pre.items()})
    z = hs[-1]
    logits = z[state.target_type] @ p["cls.W"] + p["cls.b"]
    return z, logits, ForwardTape(plan, xs, hs, pres, msgs, state.version, id(state))


def backward(
    tape: ForwardTape,
    state: ModelState,
    dz: dict[int, np.ndarray] | None = None,
    dlogits: np.ndarray | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], dict[int, np.ndarray]]:
    """Reverse pass: gradients for every parameter and for each attributed type's inputs.

    ``grads`` (e.g. already holding head gradients) is accumulated into and returned.
    """
    if tape.state_version != state.version or tape.state_id != id(state):
        raise StaleTapeError("tape was recorded against a different or since-updated model state")
    p = state.params
    names = state.type_names
    plan = tape.plan
    g = grads if grads is not None else state.zeros_like()
    z = tape.z
    dh = {t: (dz[t].copy() if dz is not None and t in dz else np.zeros_like(z[t])) for t in z}
    tt = state.target_type
    if dlogits is not None:
        g["cls.W"] += z[tt].T @ dlogits
        g["cls.b"] += dlogits.sum(axis=0)
        dh[tt] += dlogits @ p["cls.W"].T
    for layer in range(NUM_LAYERS, 0, -1):
        prev = tape.hs[layer - 1]
        pre = tape.pres[layer - 1]
        dpre = {t: dh[t] * (pre[t] > 0) for t in dh}
        dprev = {}
        for t, n in enumerate(names):
            w = p[f"l{layer}.self.{n}"]
            g[f"l{layer}.self.{n}"] += prev[t].T @ dpre[t]
            g[f"l{layer}.bias.{n}"] += dpre[t].sum(axis=0)
            dprev[t] = dpre[t] @ w.T
        for c in plan.channels:
            key = f"l{layer}.msg.{c.name}"
            dm = dpre[c.dst] / plan.fan_in[c.dst]
            g[key] += tape.msgs[layer - 1][c.name].T @ dm
            dprev[c.src] += c.norm_t @ (dm @ p[key].T)
        dh = dprev
    dx = {}
    for t, n in enumerate(names):
        if state.attr_dims[t]:
            g[f"in.{n}.W"] += tape.inputs[t].T @ dh[t]
            g[f"in.{n}.b"] += dh[t].sum(axis=0)
            dx[t] = dh[t] @ p[f"in.{n}.W"].T
        else:
            g[f"in.{n}.E"] += dh[t]
    return g, dx


# --- projection heads -------------------------------------------------------


def head_forward(state: ModelState, head: str, type_id: int, z: np.ndarray):
    """One-hidden-layer rectifier MLP; returns (output, cache)."""
    n = state.type_names[type_id]
    p = state.params
    pre = z @ p[f"{head}.{n}.W1"] + p[f"{head}.{n}.b1"]
    hid = _relu(pre)
    out = hid @ p[f"{head}.{n}.W2"] + p[f"{head}.{n}.b2"]
    return out, (head, n, z, pre, hid)


def head_backward(state: ModelState, cache, dout: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
    head, n, z, pre, hid = cache
    p = state.params
    grads[f"{head}.{n}.W2"] += hid.T @ dout
    grads[f"{head}.{n}.b2"] += dout.sum(axis=0)
    dpre = (dout @ p[f"{head}.{n}.W2"].T) * (pre > 0)
    grads[f"{head}.{n}.W1"] += z.T @ dpre
    grads[f"{head}.{n}.b1"] += dpre.sum(axis=0)
    return dpre @ p[f"{head}.{n}.W1"].T


# --- optimizer --------------------------------------------------------------


def adam_step(
    state: ModelState,
    grads: dict[str, np.ndarray],
    lr: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ModelState:
    """One bias-corrected Adam update of every tensor, in place. Missing gradients count as zero."""
    for k, gk in grads.items():
        if not np.all(np.isfinite(gk)):
            raise FloatingPointError(f"non-finite gradient for tensor {k!r}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, w in state.params.items():
        gk = grads.get(k)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        v *= b2
        if gk is not None:
            m += (1.0 - b1) * gk
            v += (1.0 - b2) * gk * gk
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"tensor {k!r} became non-finite")
    state.version += 1
    return state


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, state: ModelState, extra: dict | None = None) -> None:
    arrays = {}
    for k in state.params:
        arrays[f"param/{k}"] = state.params[k]
        arrays[f"m/{k}"] = state.m[k]
        arrays[f"v/{k}"] = state.v[k]
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "type_names": list(state.type_names),
        "attr_dims": list(state.attr_dims),
        "counts": list(state.counts),
        "target_type": state.target_type,
        "num_classes": state.num_classes,
        "t": state.t,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, graph: HinGraph | None = None) -> tuple[ModelState, dict]:
    """Load a checkpoint; with ``graph`` given, validate every tensor shape against it."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
        keys = [k[len("param/"):] for k in data.files if k.startswith("param/")]
        params = {k: data[f"param/{k}"].copy() for k in keys}
        m = {k: data[f"m/{k}"].copy() for k in keys}
        v = {k: data[f"v/{k}"].copy() for k in keys}
    cfg = ModelConfig(**meta["config"])
    state = ModelState(
        cfg, tuple(meta["type_names"]), tuple(meta["attr_dims"]), tuple(meta["counts"]),
        meta["target_type"], meta["num_classes"], params, m, v, meta["t"],
    )
    if graph is not None:
        want = param_shapes(graph, state.target_type, state.num_classes, cfg)
        if set(want) != set(params):
            raise ValueError("checkpoint tensors do not match the graph schema")
        for k, shape in want.items():
            if params[k].shape != shape:
                raise ValueError(f"checkpoint tensor {k!r} has shape {params[k].shape}, graph needs {shape}")
    return state, meta.get("extra", {})
