"""Generate the tiny planted benchmark, synthesize minority nodes and train once.

    python demos/quickstart.py
"""

import warnings

import numpy as np

from hinbal import TrainConfig, generate, preset, run_experiment
from hinbal.hin import imbalance_ratio

warnings.simplefilter("ignore")

ds, truth = generate(preset("tiny", seed=0))
split = ds.split
print("node types:", [(t.name, t.count, t.attr_dim) for t in ds.graph.schema.node_types])
print("train counts per class:", split.class_counts(split.train_mask).tolist(),
      f"(imbalance ratio {imbalance_ratio(split, split.train_mask):.2f})")

res = run_experiment(ds.graph, split, TrainConfig(epochs=100).with_seed(0))
batch = res.batch
print(f"synthetic nodes: {len(batch)} (ids {batch.ids.min()}..{batch.ids.max()}), parents {batch.parents.tolist()}")
for slot, lists in batch.neighbors.items():
    print(f"  {slot}: neighbor lists {[nb.tolist() for nb in lists]}")

m = res.metrics
print(f"best epoch {res.best_epoch}; test acc {m.acc:.3f} bacc {m.bacc:.3f} macro-F1 {m.macro_f1:.3f}")
print("confusion (rows = true class):")
print(np.array(m.confusion))
