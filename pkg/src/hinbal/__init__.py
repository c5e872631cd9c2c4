"""Influence-guided minority node synthesis for imbalanced heterogeneous graphs."""

__version__ = "0.1.0"

from .hin import (
    Dataset,
    DataFormatError,
    DegenerateClassError,
    HinGraph,
    LabelSpec,
    MetaPath,
    NetworkSchema,
    NodeType,
    Relation,
    build_imbalanced_split,
    load_dataset,
    save_dataset,
)
from .influence import ALL, PprConfig, build_influence_tables, ppr
from .synthesis import SynthesisConfig, SyntheticBatch, augment_graph, synthesize_batch
from .encoder import ModelConfig, ModelState, init_state, forward, backward, adam_step
from .objective import LossConfig, LossBreakdown, compute_objective
from .train_eval import ABLATIONS, TRAIN_PRESETS, TrainConfig, ExperimentResult, compute_metrics, run_experiment, sweep
from .bench import PlantedHinConfig, generate, preset

__all__ = [
    "__version__",
    "ABLATIONS",
    "ALL",
    "Dataset",
    "DataFormatError",
    "DegenerateClassError",
    "ExperimentResult",
    "HinGraph",
    "LabelSpec",
    "LossBreakdown",
    "LossConfig",
    "MetaPath",
    "ModelConfig",
    "ModelState",
    "NetworkSchema",
    "NodeType",
    "PlantedHinConfig",
    "PprConfig",
    "Relation",
    "SynthesisConfig",
    "SyntheticBatch",
    "TRAIN_PRESETS",
    "TrainConfig",
    "adam_step",
    "augment_graph",
    "backward",
    "build_imbalanced_split",
    "build_influence_tables",
    "compute_metrics",
    "compute_objective",
    "forward",
    "generate",
    "init_state",
    "load_dataset",
    "ppr",
    "preset",
    "run_experiment",
    "save_dataset",
    "sweep",
    "synthesize_batch",
]
