"""Experiment pipeline: influence, synthesis, training loop, evaluation and sweeps."""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .encoder import ModelConfig, ModelState, adam_step, build_plan, forward, init_state
from .hin import HinGraph, LabelSpec, MetaPath
from .influence import PprConfig, build_influence_tables
from .objective import LossConfig, ObjectiveContext, compute_objective
from .synthesis import (
    SynthesisConfig,
    SyntheticBatch,
    augment_graph,
    empty_batch,
    synthesize_node_attributes,
    synthesize_topology,
)

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 0.01
    weight_decay: float = 0.0  # L2 on weight matrices, added to gradients before Adam
    patience: int = 50
    eval_every: int = 1
    seed: int = 0
    synthesize: bool = True
    meta_paths: dict = field(default_factory=dict)  # slot name -> list of relation-name lists
    ppr: PprConfig = PprConfig()
    synthesis: SynthesisConfig = SynthesisConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.eval_every < 1 or self.patience < 0:
            raise ValueError("eval_every must be >= 1 and patience >= 0")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(
            self,
            seed=seed,
            synthesis=replace(self.synthesis, seed=seed),
            model=replace(self.model, seed=seed),
        )


VANILLA_OVERRIDES = {"synthesize": False, "loss.lambda1": 0.0, "loss.lambda2": 0.0}

# named variants used by benchmark comparisons; each is a set of overrides on a base config
ABLATIONS = {
    "sns": {},
    "vanilla": VANILLA_OVERRIDES,
    "random_candidates": {"synthesis.candidate_mode": "random"},
    "no_sem": {"loss.lambda1": 0.0},
    "no_pro": {"loss.lambda2": 0.0},
}

# named training configs; ``desk`` is tuned for the desk benchmark preset
TRAIN_PRESETS = {
    "default": TrainConfig(),
    "desk": TrainConfig(lr=0.001, synthesis=SynthesisConfig(mu=5)),
}


# --- config (de)serialization ------------------------------------------------

_NESTED = {"ppr": PprConfig, "synthesis": SynthesisConfig, "model": ModelConfig, "loss": LossConfig}


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: Mapping[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    """Strict merge of ``d`` over ``base``; unknown keys raise ``ValueError``."""
    base = base or TrainConfig()
    top = {f.name for f in fields(TrainConfig)}
    kwargs = {}
    for k, v in d.items():
        if k not in top:
            raise ValueError(f"unknown config key {k!r}")
        if k in _NESTED:
            if not isinstance(v, Mapping):
                raise ValueError(f"config section {k!r} must be a mapping")
            cls = _NESTED[k]
            allowed = {f.name for f in fields(cls)}
            for kk in v:
                if kk not in allowed:
                    raise ValueError(f"unknown config key {k}.{kk}")
            kwargs[k] = replace(getattr(base, k), **dict(v))
        else:
            kwargs[k] = v
    return replace(base, **kwargs)


def apply_overrides(cfg: TrainConfig, overrides: Mapping[str, Any]) -> TrainConfig:
    """Dotted-key overrides, e.g. ``{"loss.temperature": 0.5, "synthesis.mu": "ALL"}``."""
    nested: dict[str, Any] = {}
    for key, val in overrides.items():
        key = GRID_ALIASES.get(key, key)
        parts = key.split(".")
        if len(parts) == 1:
            nested[parts[0]] = val
        elif len(parts) == 2:
            nested.setdefault(parts[0], {})[parts[1]] = val
        else:
            raise ValueError(f"override key {key!r} nests too deeply")
    return config_from_dict(nested, cfg)


GRID_ALIASES = {
    "mu": "synthesis.mu",
    "T": "loss.temperature",
    "temperature": "loss.temperature",
    "lambda1": "loss.lambda1",
    "lambda2": "loss.lambda2",
    "alpha": "ppr.alpha",
}


def config_hash(cfg: TrainConfig) -> str:
    d = config_to_dict(cfg)
    d.pop("seed", None)
    for sec in ("synthesis", "model"):
        d[sec].pop("seed", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:12]


# --- metrics -----------------------------------------------------------------


@dataclass
class MetricsReport:
    macro_f1: float
    acc: float
    bacc: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    """Rows are true classes, columns predicted classes."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = cm.sum()
    present = support > 0
    return MetricsReport(
        macro_f1=float(f1.mean()),
        acc=float(tp.sum() / total) if total else 0.0,
        bacc=float(recall[present].mean()) if present.any() else 0.0,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=cm.tolist(),
    )


def compute_metrics(predictions: np.ndarray, labels: np.ndarray, mask: np.ndarray, num_classes: int | None = None) -> MetricsReport:
    """ACC, balanced accuracy and macro-F1 over the labeled nodes in ``mask``."""
    mask = np.asarray(mask, dtype=bool) & (np.asarray(labels) >= 0)
    y = np.asarray(labels)[mask]
    p = np.asarray(predictions)[mask]
    m = int(num_classes if num_classes is not None else max(y.max(initial=-1), p.max(initial=-1)) + 1)
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return metrics_from_confusion(cm)


def aggregate(reports: Sequence[MetricsReport] | Sequence[Mapping]) -> dict[str, dict[str, float]]:
    """Mean and population std of the headline metrics."""
    out = {}
    for key in ("macro_f1", "acc", "bacc"):
        vals = np.array([r[key] if isinstance(r, Mapping) else getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
    return out


# --- experiment ----------------------------------------------------------------


@dataclass(eq=False)
class ExperimentResult:
    metrics: MetricsReport
    val_metrics: MetricsReport
    log: list[dict]
    state: ModelState
    batch: SyntheticBatch
    best_epoch: int
    config: TrainConfig


def _resolve_paths(graph: HinGraph, spec: Mapping[str, Sequence[Sequence[str]]]) -> dict[str, list[MetaPath]]:
    return {slot: [MetaPath.build(graph.schema, list(p)) for p in paths] for slot, paths in spec.items()}


def _check_isolation(labels: LabelSpec, batch: SyntheticBatch):
    n = len(labels.labels)
    ids = batch.ids
    if ids.size and (ids.min() < n):
        raise AssertionError("synthetic ids overlap real target ids")
    for a, b in batch.parents:
        if not (labels.train_mask[a] and labels.train_mask[b]):
            raise AssertionError("synthetic parent outside the training mask")


def prepare_synthesis(graph: HinGraph, labels: LabelSpec, cfg: TrainConfig, seed_offset: int = 0) -> SyntheticBatch:
    if not cfg.synthesize or not labels.minority_classes:
        return empty_batch(graph, labels)
    paths = _resolve_paths(graph, cfg.meta_paths) if cfg.meta_paths else None
    tables = build_influence_tables(graph, labels, cfg.synthesis.mu, cfg.ppr, paths, cfg.synthesis.candidate_mode)
    rng = cfg.synthesis.seed if not seed_offset else np.random.default_rng([cfg.synthesis.seed, seed_offset])
    return synthesize_topology(graph, labels, tables, cfg.synthesis, rng)


def run_experiment(graph: HinGraph, labels: LabelSpec, cfg: TrainConfig = TrainConfig()) -> ExperimentResult:
    """Full pipeline on one split; test metrics come from the best-validation checkpoint."""
    tid = labels.target_type
    if tid not in graph.attributes:
        raise ExperimentError("setup", ValueError("the target node type must carry attributes"))
    x_real = graph.attributes[tid]
    n_real = x_real.shape[0]

    try:
        batch = prepare_synthesis(graph, labels, cfg)
        _check_isolation(labels, batch)
    except Exception as exc:
        raise ExperimentError("synthesis", exc) from exc

    def build(batch):
        if batch.attributes is None:
            batch.attributes = synthesize_node_attributes(batch, x_real, cfg.synthesis.k_percent)
        aug, alab = augment_graph(graph, labels, batch)
        return aug, alab, ObjectiveContext.build(aug, alab, n_real), build_plan(aug)

    try:
        aug, alab, ctx, plan = build(batch)
        state = init_state(aug, tid, labels.num_classes, cfg.model)
    except Exception as exc:
        raise ExperimentError("setup", exc) from exc

    rng = np.random.default_rng([cfg.seed, 7])
    prev_dx = None
    best = (-1.0, -1)
    best_state, best_attrs = state.copy(), None
    history = []
    for epoch in range(cfg.epochs):
        try:
            if epoch and cfg.synthesis.resample_topology_each_epoch and len(batch):
                batch = prepare_synthesis(graph, labels, cfg, seed_offset=epoch)
                aug, alab, ctx, plan = build(batch)
            attrs = None
            if len(batch):
                syn = synthesize_node_attributes(batch, x_real, cfg.synthesis.k_percent, prev_dx)
                attrs = {tid: np.vstack([x_real, syn])}
            if cfg.loss.negative_sampling and ctx.has_synthetic:
                ctx.negatives = ctx.sample_negatives(rng)
            bd, grads, dx, logits = compute_objective(aug, state, ctx, cfg.loss, attributes=attrs, plan=plan)
        except Exception as exc:
            raise ExperimentError(f"forward/backward epoch {epoch}", exc) from exc
        prev_dx = dx[tid][:n_real]
        if cfg.weight_decay:
            for k, w in state.params.items():
                if w.ndim == 2:
                    grads[k] += cfg.weight_decay * w
        record = {"epoch": epoch, **bd.as_dict()}
        if epoch % cfg.eval_every == 0:
            pred = logits[:n_real].argmax(axis=1)
            vm = compute_metrics(pred, labels.labels, labels.val_mask, labels.num_classes)
            record.update(val_macro_f1=vm.macro_f1, val_acc=vm.acc, val_bacc=vm.bacc)
            if vm.macro_f1 > best[0]:
                best = (vm.macro_f1, epoch)
                best_state, best_attrs = state.copy(), attrs
                best_batch, best_graph = batch, (aug, plan)
        history.append(record)
        try:
            adam_step(state, grads, cfg.lr)
        except FloatingPointError as exc:
            raise ExperimentError(f"optimizer epoch {epoch}", exc) from exc
        if epoch - best[1] > cfg.patience:
            break

    aug, plan = best_graph
    if best_attrs is not None:
        best_batch = dataclasses.replace(best_batch, attributes=best_attrs[tid][n_real:].copy())
    _, logits, _ = forward(aug, best_state, best_attrs, plan)
    pred = logits[:n_real].argmax(axis=1)
    test = compute_metrics(pred, labels.labels, labels.test_mask, labels.num_classes)
    val = compute_metrics(pred, labels.labels, labels.val_mask, labels.num_classes)
    return ExperimentResult(test, val, history, best_state, best_batch, best[1], cfg)


def write_run(out: str | Path, result: ExperimentResult, extra: Mapping | None = None) -> None:
    """metrics.json, train_log.jsonl and the resolved config (checkpoint is written by the caller)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"test": result.metrics.as_dict(), "val": result.val_metrics.as_dict(), "best_epoch": result.best_epoch}
    if extra:
        payload.update(extra)
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "train_log.jsonl", "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(config_to_dict(result.config), indent=2, sort_keys=True) + "\n")


# --- sweeps --------------------------------------------------------------------


def grid_points(grid: Mapping[str, Sequence[Any]]) -> list[dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_one(args):
    graph, labels, cfg, point, seed = args
    row = {**point, "seed": seed, "config_hash": None}
    try:
        run_cfg = apply_overrides(cfg, point).with_seed(seed)
        row["config_hash"] = config_hash(run_cfg)
        res = run_experiment(graph, labels, run_cfg)
        row.update(status="ok", macro_f1=res.metrics.macro_f1, acc=res.metrics.acc, bacc=res.metrics.bacc)
    except Exception as exc:  # failures are recorded, the sweep goes on
        row.update(status="error", error=str(exc))
    return row


def sweep(
    graph: HinGraph,
    labels: LabelSpec,
    cfg: TrainConfig,
    grid: Mapping[str, Sequence[Any]],
    seeds: Iterable[int] = (0,),
    workers: int = 1,
) -> list[dict]:
    """One run per (grid point, seed); rows come back in grid-then-seed order."""
    jobs = [(graph, labels, cfg, p, s) for p in grid_points(grid) for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


def summarize(rows: Sequence[Mapping], by: Sequence[str]) -> list[dict]:
    """Mean/std of metrics per distinct value combination of ``by`` (successful rows only)."""
    groups: dict[tuple, list] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault(tuple(r.get(k) for k in by), []).append(r)
    out = []
    for key, rs in groups.items():
        agg = aggregate(rs)
        entry = dict(zip(by, key))
        for metric, st in agg.items():
            entry[f"{metric}_mean"] = st["mean"]
            entry[f"{metric}_std"] = st["std"]
        entry["n"] = len(rs)
        out.append(entry)
    return out
