#!/usr/bin/env python3
"""Split-MNIST, one task per digit pair, trained in sequence.

Uses a third of the training images and 5 epochs per task so it finishes in
about a minute; the full desk-scale run is ``relmap train`` with defaults.
Needs MNIST in data/mnist (see scripts/fetch_mnist.py).
"""
import numpy as np

from relmap import data
from relmap.metrics import RunRecord, emit_report
from relmap.supervised import TrainConfig, run_supervised

train, test = data.load_mnist()
stream = data.make_split(train, test, seed=0, train_limit=20000)
for t in stream.tasks:
    print(f"{t.name}: {len(t.train)} train / {len(t.val)} val / {len(t.test)} test")

# %% train
cfg = TrainConfig(epochs=5, seed=0)
record = RunRecord("demo-split", cfg.as_dict())
record.start()
res = run_supervised(stream, cfg, record)

# %% the accuracy matrix: row t holds every task's accuracy right after task t
np.set_printoptions(precision=4, suppress=True)
print(res.accuracy_matrix)
print(f"mean accuracy after all tasks: {res.mean_accuracy:.4f}")
print("prune epochs:", [r.prune_epoch for r in res.reports])

# %% capacity: each task freezes what it used, the rest stays free
for e in record.of("task_end"):
    print(f"after task {e['task']}: {e['frozen']} frozen weights, sparsity {e['sparsity']:.3f}")

# %% charts
paths = emit_report([record], "demo-report")
print("wrote", ", ".join(str(p) for p in paths.values()))
