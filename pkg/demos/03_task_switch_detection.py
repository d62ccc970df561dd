#!/usr/bin/env python3
"""Learning Split-MNIST from an unlabelled stream of tasks.

The trainer never sees task ids.  It watches the network's confidence on
incoming batches and opens a new relevance map when confidence drops
sharply and stays down.  Reduced settings (a quarter of the images, 4
passes) keep it to a couple of minutes.
"""
import numpy as np

from relmap import data
from relmap.metrics import RunRecord
from relmap.unsupervised import UnsupervisedConfig, run_unsupervised

train, test = data.load_mnist()
stream = data.make_split(train, test, seed=0, train_limit=15000)
cfg = UnsupervisedConfig(epochs=4, seed=0)
record = RunRecord("demo-stream", cfg.as_dict())
record.start()
res = run_unsupervised(stream, cfg, record)

# %% where were the switches?
print("true boundaries:    ", res.boundaries)
print("detected at batches:", [d.batch for d in res.detections])
for d in res.detections:
    print(f"  batch {d.batch}: t = {d.t:.1f}, p = {d.p:.1e}")

# %% novelty over the stream (logged every 500 batches)
for e in record.of("progress"):
    print(f"batch {e['batch']:>5}: training map {e['est_task']}, novelty {e['novelty']:.3f}")

# %% how well does each detected task do?
np.set_printoptions(precision=4, suppress=True)
print("true -> detected task:", res.alignment)
print("accuracy per task:", np.array(res.aligned_accuracies))
print(f"mean {res.mean_accuracy:.4f}; fraction of stream claimed by old tasks {res.claimed_fraction:.3f}")

# %% without any task information, pick the most confident mask per test image
print("class accuracy with inferred task:", np.array(res.inferred_accuracies))
# Digit-pair tasks share low-level features, so an older mask is often just as
# confident on a newer task's digits; task inference works much better on
# permuted tasks (see ``relmap infer`` on a permuted-mnist run).
