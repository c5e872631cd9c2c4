"""Command-line entry point: gen, ingest, influence, augment, train, eval, sweep, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Diagnostics go to stderr; every machine-readable output goes to files under
``--out`` together with ``run_info.json`` (resolved config + library version).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bench import PRESETS, generate, preset
from .encoder import forward, load_checkpoint, save_checkpoint
from .hin import (
    Dataset,
    DataFormatError,
    DegenerateClassError,
    build_imbalanced_split,
    imbalance_ratio,
    load_dataset,
    save_dataset,
)
from .influence import build_influence_tables, write_influence_tables
from .synthesis import augment_graph, read_batch_manifest, synthesize_node_attributes, write_augmented
from .train_eval import (
    TRAIN_PRESETS,
    ExperimentError,
    TrainConfig,
    _resolve_paths,
    apply_overrides,
    compute_metrics,
    config_from_dict,
    config_hash,
    config_to_dict,
    prepare_synthesis,
    run_experiment,
    summarize,
    sweep,
    write_run,
)

log = logging.getLogger("hinbal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

MU_GRID = "1,3,5,10,30,50,100,ALL"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- helpers -------------------------------------------------------------------


def parse_value(text: str) -> Any:
    """JSON scalar/list if it parses, the raw string otherwise (so ALL stays ``"ALL"``)."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(items: Sequence[str] | None) -> dict[str, Any]:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise UsageError(f"expected key=value, got {item!r}")
        out[key.strip()] = parse_value(val.strip())
    return out


def load_config(spec: str | None, overrides: dict | None = None) -> TrainConfig:
    """A preset name (``default``, ``desk``) or a JSON file; ``None`` means ``default``."""
    if spec is None or spec in TRAIN_PRESETS:
        cfg = TRAIN_PRESETS[spec or "default"]
    else:
        path = Path(spec)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {spec} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{spec}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{spec}: top level must be an object")
        try:
            cfg = config_from_dict(raw)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"{spec}: {exc}") from None
    if overrides:
        try:
            cfg = apply_overrides(cfg, overrides)
        except (ValueError, TypeError) as exc:
            raise UsageError(str(exc)) from None
    return cfg


def prepare_out(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_info(out: Path, command: str, args: argparse.Namespace, config: Any = None) -> None:
    info = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=str) + "\n")


def _load(path: str, need_split: bool = True) -> Dataset:
    ds = load_dataset(path)
    if need_split and ds.split is None:
        raise DataFormatError(f"{path}: dataset has no split; run `ingest` with --label-rate/--imb-ratio first")
    return ds


def _set_threads(n: int | None) -> int:
    return max(1, n or os.cpu_count() or 1)


# --- subcommands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    overrides = parse_assignments(args.set)
    if args.label_rate is not None:
        overrides["label_rate"] = args.label_rate
    if args.imb_ratio is not None:
        overrides["imb_ratio"] = args.imb_ratio
    try:
        cfg = preset(args.preset, seed=args.seed, **overrides)
    except TypeError as exc:
        raise UsageError(f"bad generator override: {exc}") from None
    ds, truth = generate(cfg)
    out = prepare_out(args.out)
    save_dataset(out, ds)
    blocks = {k: v.tolist() for k, v in truth.blocks.items()}
    (out / "ground_truth.json").write_text(json.dumps({"blocks": blocks, "class_means": truth.class_means.tolist()}) + "\n")
    write_run_info(out, "gen", args, {"preset": args.preset, "overrides": overrides})
    log.info("wrote %s preset to %s", args.preset, out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    ds = load_dataset(args.data)
    if args.minority is not None:
        ds.minority_classes = tuple(int(c) for c in args.minority.split(",") if c.strip())
    if args.label_rate is not None or args.imb_ratio is not None:
        if args.label_rate is None or args.imb_ratio is None:
            raise UsageError("--label-rate and --imb-ratio go together")
        ds.split = build_imbalanced_split(
            ds.graph, ds.target_type, ds.labels, args.label_rate, args.imb_ratio,
            ds.minority_classes, args.seed, ds.num_classes,
        )
    elif ds.split is not None and args.minority is not None:
        s = ds.split
        ds.split = type(s)(s.target_type, s.num_classes, s.labels, s.train_mask, s.val_mask, s.test_mask, ds.minority_classes)
    out = prepare_out(args.out)
    save_dataset(out, ds)
    g = ds.graph
    summary = {
        "node_types": {t.name: {"count": t.count, "attr_dim": t.attr_dim} for t in g.schema.node_types},
        "relations": {r.name: int(a.nnz) for r, a in zip(g.schema.relations, g.adjacency)},
        "class_counts": np.bincount(ds.labels[ds.labels >= 0], minlength=ds.num_classes).tolist(),
        "minority_classes": list(ds.minority_classes),
    }
    if ds.split is not None:
        summary["train_counts"] = ds.split.class_counts(ds.split.train_mask).tolist()
        summary["train_imbalance_ratio"] = imbalance_ratio(ds.split, ds.split.train_mask)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_run_info(out, "ingest", args)
    return EXIT_OK


def _tables(ds: Dataset, cfg: TrainConfig):
    paths = _resolve_paths(ds.graph, cfg.meta_paths) if cfg.meta_paths else None
    return build_influence_tables(ds.graph, ds.split, cfg.synthesis.mu, cfg.ppr, paths, cfg.synthesis.candidate_mode)


def cmd_influence(args) -> int:
    cfg = load_config(args.config, parse_assignments(args.set)).with_seed(args.seed)
    ds = _load(args.data)
    out = prepare_out(args.out)
    write_influence_tables(out, _tables(ds, cfg), ds.graph)
    write_run_info(out, "influence", args, config_to_dict(cfg))
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = load_config(args.config, parse_assignments(args.set)).with_seed(args.seed)
    ds = _load(args.data)
    out = prepare_out(args.out)
    if args.dump_influence:
        write_influence_tables(args.dump_influence, _tables(ds, cfg), ds.graph)
    batch = prepare_synthesis(ds.graph, ds.split, cfg)
    x = ds.graph.attributes.get(ds.target_type)
    if x is not None:
        batch.attributes = synthesize_node_attributes(batch, x, cfg.synthesis.k_percent)
    write_augmented(out, ds.graph, ds.split, batch)
    write_run_info(out, "augment", args, config_to_dict(cfg))
    log.info("added %d synthetic nodes", len(batch))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, parse_assignments(args.set)).with_seed(args.seed)
    ds = _load(args.data)
    out = prepare_out(args.out)
    result = run_experiment(ds.graph, ds.split, cfg)
    write_run(out, result, {"seed": args.seed, "config_hash": config_hash(cfg), "version": __version__})
    save_checkpoint(out / "checkpoint.npz", result.state, {"best_epoch": result.best_epoch})
    write_augmented(out / "augmented", ds.graph, ds.split, result.batch)
    write_run_info(out, "train", args, config_to_dict(cfg))
    m = result.metrics
    print(f"test macro_f1={m.macro_f1:.4f} acc={m.acc:.4f} bacc={m.bacc:.4f} best_epoch={result.best_epoch}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load(args.data)
    run = Path(args.run)
    aug_dir = run / "augmented"
    batch = None
    if (aug_dir / "synthetic.json").exists():
        aug_ds = load_dataset(aug_dir)
        n = ds.graph.num_nodes(ds.target_type)
        x_aug = aug_ds.graph.attributes.get(ds.target_type)
        batch = read_batch_manifest(aug_dir / "synthetic.json", None if x_aug is None else x_aug[n:])
    graph = ds.graph
    attrs = None
    if batch is not None and len(batch):
        graph, _ = augment_graph(ds.graph, ds.split, batch)
        attrs = {ds.target_type: np.vstack([ds.graph.attributes[ds.target_type], batch.attributes])}
    state, extra = load_checkpoint(run / "checkpoint.npz", graph)
    _, logits, _ = forward(graph, state, attrs)
    n = ds.graph.num_nodes(ds.target_type)
    pred = logits[:n].argmax(axis=1)
    masks = {"train": ds.split.train_mask, "val": ds.split.val_mask, "test": ds.split.test_mask}
    report = {k: compute_metrics(pred, ds.labels, masks[k], ds.num_classes).as_dict() for k in args.split}
    out = prepare_out(args.out)
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    np.savetxt(out / "predictions.txt", pred, fmt="%d")
    write_run_info(out, "eval", args, {"checkpoint": str(run / "checkpoint.npz"), **extra})
    return EXIT_OK


def parse_grid(items: Sequence[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        key, sep, vals = item.partition("=")
        if not sep:
            raise UsageError(f"grid axis must look like key=v1,v2,..., got {item!r}")
        grid[key.strip()] = [parse_value(v.strip()) for v in vals.split(",") if v.strip()]
        if not grid[key.strip()]:
            raise UsageError(f"grid axis {key!r} has no values")
    return grid


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, parse_assignments(args.set))
    grid = parse_grid(args.grid or [f"mu={MU_GRID}"])
    try:
        for key, vals in grid.items():
            for v in vals:
                apply_overrides(cfg, {key: v})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad grid: {exc}") from None
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    ds = _load(args.data)
    out = prepare_out(args.out)
    rows = sweep(ds.graph, ds.split, cfg, grid, seeds, workers=_set_threads(args.threads))
    for r in rows:
        r["imb_ratio"] = round(imbalance_ratio(ds.split, ds.split.train_mask), 6)
    with open(out / "results.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, default=str) + "\n")
    write_run_info(out, "sweep", args, {"base": config_to_dict(cfg), "grid": grid, "seeds": seeds})
    failed = [r for r in rows if r.get("status") != "ok"]
    for r in failed:
        print(f"run failed: {r}", file=sys.stderr)
    if failed and len(failed) == len(rows):
        return EXIT_NUMERIC
    return EXIT_OK


def read_results(paths: Sequence[str]) -> list[dict]:
    rows = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "results.jsonl"
        try:
            lines = p.read_text().splitlines()
        except FileNotFoundError:
            raise DataFormatError(f"{p}: file not found") from None
        for i, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{p}:{i}: {exc.msg}") from None
    return rows


def cmd_report(args) -> int:
    rows = read_results(args.results)
    by = [k for k in args.by.split(",") if k.strip()] if args.by else []
    if not by:
        keys = set().union(*(r.keys() for r in rows)) if rows else set()
        skip = {"seed", "config_hash", "status", "error", "macro_f1", "acc", "bacc", "imb_ratio"}
        by = sorted(keys - skip) or ["imb_ratio"]
    summary = summarize(rows, by)
    summary.sort(key=lambda e: [str(e[k]) for k in by])
    out = prepare_out(args.out)
    if args.format == "json":
        (out / "report.json").write_text(json.dumps({"by": by, "rows": summary}, indent=2, default=str) + "\n")
    else:
        buf = io.StringIO()
        if summary:
            w = csv.DictWriter(buf, fieldnames=list(summary[0]))
            w.writeheader()
            w.writerows(summary)
        (out / "report.csv").write_text(buf.getvalue())
    write_run_info(out, "report", args, {"by": by})
    for e in summary:
        key = ", ".join(f"{k}={e[k]}" for k in by)
        print(f"{key}: macro_f1 {e['macro_f1_mean']:.4f}±{e['macro_f1_std']:.4f}  bacc {e['bacc_mean']:.4f}±{e['bacc_std']:.4f}  (n={e['n']})", file=sys.stderr)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, config: bool = True, data: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--threads", type=int, default=None, help="worker processes for parallel stages (default: all cores)")
    if data:
        p.add_argument("--data", required=True, help="dataset directory in the hinbal text format")
    if config:
        p.add_argument("--config", default="default", help="JSON config file or a preset name: default, desk (default: %(default)s)")
        p.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override a config field, dotted for nested sections (e.g. loss.temperature=0.5); repeatable",
        )


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="hinbal", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"hinbal {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a planted benchmark dataset", formatter_class=fmt)
    _common(p, config=False, data=False)
    p.add_argument("--preset", choices=sorted(PRESETS), default="tiny", help="benchmark preset")
    p.add_argument("--label-rate", type=float, default=None, help="override the preset's label rate")
    p.add_argument("--imb-ratio", type=float, default=None, help="override the preset's imbalance ratio")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a top-level generator field; repeatable")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="validate a dataset directory, optionally re-split it", formatter_class=fmt)
    _common(p, config=False)
    p.add_argument("--label-rate", type=float, default=None, help="build a new split with this majority label rate")
    p.add_argument("--imb-ratio", type=float, default=None, help="minority/majority train ratio for the new split")
    p.add_argument("--minority", default=None, help="comma-separated minority class ids (default: from schema.json)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("influence", help="compute influence scores and candidate sets", formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("augment", help="write the dataset augmented with synthetic minority nodes", formatter_class=fmt)
    _common(p)
    p.add_argument("--dump-influence", metavar="DIR", default=None, help="also write influence score/candidate tables to DIR")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train and evaluate one configuration", formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="re-evaluate a trained run directory", formatter_class=fmt)
    _common(p, config=False)
    p.add_argument("--run", required=True, help="directory written by `train`")
    p.add_argument("--split", nargs="+", choices=["train", "val", "test"], default=["val", "test"], help="masks to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over hyper-parameters and seeds", formatter_class=fmt)
    _common(p)
    p.add_argument(
        "--grid", action="append", metavar="KEY=V1,V2,...",
        help=f"grid axis, repeatable; aliases mu, T, lambda1, lambda2, alpha (default: mu={MU_GRID})",
    )
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate sweep results into mean/std tables", formatter_class=fmt)
    p.add_argument("results", nargs="+", help="results.jsonl files or sweep output directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--by", default=None, help="comma-separated grouping keys (default: every grid key)")
    p.add_argument("--format", choices=["csv", "json"], default="csv", help="output format")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    p.add_argument("--threads", type=int, default=None, help="unused; accepted for uniformity")
    p.set_defaults(func=cmd_report)
    return parser


def _numeric(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (FloatingPointError, np.linalg.LinAlgError, OverflowError)):
            return True
        exc = exc.__cause__
    return False


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if not args.verbose:
            warnings.simplefilter("ignore")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DegenerateClassError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExperimentError as exc:
        if _numeric(exc):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc.cause, (DataFormatError, DegenerateClassError, ValueError)):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # schema/shape inconsistencies surfaced by loaders and validators
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
