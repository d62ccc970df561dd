"""MNIST ingestion and deterministic task streams.

IDX files are read directly (optionally gzip-compressed).  Task streams are
pure functions of their seed: iterating twice yields identical batches.
"""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ENV = "RELMAP_DATA_DIR"
SPLIT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))

_IDX_TYPES = {0x08: np.dtype(np.uint8)}


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse one IDX file into an array of its declared shape."""
    with _open(path) as f:
        buf = f.read()
    if len(buf) < 4:
        raise FormatError(f"{path}: file too short for IDX magic ({len(buf)} bytes)", offset=len(buf))
    if buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_TYPES:
        raise FormatError(f"{path}: bad IDX magic {buf[:4].hex()}", offset=0)
    dtype = _IDX_TYPES[buf[2]]
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError(f"{path}: truncated IDX header, expected {header} bytes, got {len(buf)}",
                          offset=len(buf))
    dims = tuple(int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for dims {dims}, got {len(buf)}",
                          offset=min(len(buf), expected))
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims).copy()


def write_idx(path, array) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, a.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in a.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + a.tobytes())


@dataclass
class LabeledDataset:
    """Images kept as raw bytes; ``perm`` optionally reorders pixel columns."""

    pixels: np.ndarray  # uint8, n x 784
    labels: np.ndarray  # int64, n
    perm: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(len(self.pixels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.pixels) != len(self.labels):
            raise FormatError(f"{len(self.pixels)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise FormatError("labels outside [0, 10)")

    def __len__(self):
        return len(self.labels)

    @property
    def images(self) -> np.ndarray:
        return self.take(np.arange(len(self)))[0]

    def take(self, idx) -> tuple[np.ndarray, np.ndarray]:
        px = self.pixels[idx]
        if self.perm is not None:
            px = px[:, self.perm]
        return px / 255.0, self.labels[idx]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.pixels[idx], self.labels[idx], self.perm)


def load_idx(images_path, labels_path=None) -> LabeledDataset:
    images_path = Path(images_path)
    if labels_path is None:
        labels_path = images_path.with_name(images_path.name.replace("images-idx3", "labels-idx1"))
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise FormatError(f"unexpected IDX ranks: images {images.shape}, labels {labels.shape}")
    return LabeledDataset(images.reshape(len(images), -1), labels)


def data_dir(explicit=None) -> Path:
    return Path(explicit or os.environ.get(DATA_ENV) or "data/mnist")


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (root / name).exists():
            return root / name
    raise FileNotFoundError(f"{stem}[.gz] not found in {root} (set {DATA_ENV} or --data-dir)")


def load_mnist(root=None) -> tuple[LabeledDataset, LabeledDataset]:
    root = data_dir(root)
    train = load_idx(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
    test = load_idx(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"))
    return train, test


# -- tasks and streams ---------------------------------------------------------


@dataclass
class Task:
    name: str
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    task_ids: np.ndarray  # ground-truth provenance per sample, never shown to learners


@dataclass
class TaskStream:
    tasks: list[Task]
    batch_size: int = 128
    seed: int = 0
    ramp: int = 0
    kind: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def _order(self, task: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0xBA7C, task, epoch])
        return rng.permutation(len(self.tasks[task].train))

    def epoch_batches(self, task: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Shuffled mini-batches of one task, drawn without replacement."""
        order = self._order(task, epoch)
        data = self.tasks[task].train
        for i in range(0, len(order), self.batch_size):
            yield data.take(order[i:i + self.batch_size])

    def _sequence(self, epochs: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-batch (task ids, sample indices) for the whole label-free stream."""
        batches = []
        for t in range(len(self.tasks)):
            idx = np.concatenate([self._order(t, e) for e in range(epochs)])
            cuts = np.arange(self.batch_size, len(idx), self.batch_size)
            tb = [(np.full(len(c), t), c) for c in np.split(idx, cuts)]
            if self.ramp and batches:
                tb = self._blend(batches, tb)
            batches.extend(tb)
        return batches

    def _blend(self, batches, incoming):
        r, b = self.ramp, self.batch_size
        r = min(r, len(incoming), len(batches))
        old = batches[-r:]
        del batches[-r:]
        new, rest = incoming[:r], incoming[r:]
        old_t = np.concatenate([o[0] for o in old])
        old_i = np.concatenate([o[1] for o in old])
        new_t = np.concatenate([n[0] for n in new])
        new_i = np.concatenate([n[1] for n in new])
        n_new = [int(round((k + 1) / (r + 1) * b)) for k in range(r)]
        n_old = [b - n for n in n_new]
        use_old, use_new = sum(n_old), sum(n_new)
        lead_t, lead_i = old_t[:len(old_t) - use_old], old_i[:len(old_i) - use_old]
        mix_old_t, mix_old_i = old_t[len(old_t) - use_old:], old_i[len(old_i) - use_old:]
        mix_new_t, mix_new_i = new_t[:use_new], new_i[:use_new]
        tail_t, tail_i = new_t[use_new:], new_i[use_new:]
        out = []
        for i in range(0, len(lead_i), b):
            out.append((lead_t[i:i + b], lead_i[i:i + b]))
        po = pn = 0
        for k in range(r):
            out.append((np.concatenate([mix_old_t[po:po + n_old[k]], mix_new_t[pn:pn + n_new[k]]]),
                        np.concatenate([mix_old_i[po:po + n_old[k]], mix_new_i[pn:pn + n_new[k]]])))
            po += n_old[k]
            pn += n_new[k]
        for i in range(0, len(tail_i), b):
            out.append((tail_t[i:i + b], tail_i[i:i + b]))
        batches.extend(out)
        return rest

    def _gather(self, tids, idx) -> Batch:
        xs, ys = np.empty((len(idx), self.tasks[0].train.pixels.shape[1])), np.empty(len(idx), dtype=np.int64)
        for t in np.unique(tids):
            sel = tids == t
            xs[sel], ys[sel] = self.tasks[t].train.take(idx[sel])
        return Batch(xs, ys, tids.astype(np.int64))

    def stream(self, epochs: int = 1) -> Iterator[Batch]:
        """Label-free stream: each task's data for ``epochs`` passes, then the next task."""
        for tids, idx in self._sequence(epochs):
            yield self._gather(tids, idx)

    def provenance(self, epochs: int = 1) -> list[np.ndarray]:
        return [tids for tids, _ in self._sequence(epochs)]

    def boundaries(self, epochs: int = 1) -> list[int]:
        """Index of the first batch containing data of each task after the first."""
        seen, out = {0}, []
        for i, tids in enumerate(self.provenance(epochs)):
            for t in np.unique(tids):
                if t not in seen:
                    seen.add(int(t))
                    out.append(i)
        return out


def _split_val(data: LabeledDataset, fraction: float, rng) -> tuple[LabeledDataset, LabeledDataset]:
    order = rng.permutation(len(data))
    n_val = int(round(fraction * len(data)))
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))


def _limit(data: LabeledDataset, limit, rng) -> LabeledDataset:
    if limit is None or limit >= len(data):
        return data
    if limit < 1:
        raise ConfigError(f"sample limit must be positive, got {limit}")
    return data.subset(np.sort(rng.permutation(len(data))[:limit]))


def task_permutation(seed: int, task: int, n_pixels: int = 784) -> np.ndarray:
    if task == 0:
        return np.arange(n_pixels)
    return np.random.default_rng(seed + task).permutation(n_pixels)


def make_permuted(train: LabeledDataset, test: LabeledDataset, tasks: int = 5, seed: int = 0, *,
                  batch_size=128, val_fraction=0.1, train_limit=None, test_limit=None) -> TaskStream:
    """Task 0 sees the original images; task k applies a fixed pixel permutation from ``seed + k``."""
    if tasks < 1:
        raise ConfigError("permuted stream needs at least one task")
    rng = np.random.default_rng([seed, 0x9E4])
    base_train = _limit(train, train_limit, rng)
    base_test = _limit(test, test_limit, rng)
    out = []
    for k in range(tasks):
        perm = task_permutation(seed, k, train.pixels.shape[1])
        tr, va = _split_val(base_train, val_fraction, np.random.default_rng([seed, 0x7A1, k]))
        out.append(Task(f"perm{k}", replace(tr, perm=perm), replace(va, perm=perm),
                        replace(base_test, perm=perm)))
    return TaskStream(out, batch_size=batch_size, seed=seed, kind="permuted-mnist")


def make_split(train: LabeledDataset, test: LabeledDataset, seed: int = 0, *, tasks: int = 5,
               batch_size=128, val_fraction=0.1, train_limit=None, test_limit=None) -> TaskStream:
    """Five digit-pair tasks (0,1)...(8,9) keeping the original 10-way labels."""
    if not 1 <= tasks <= len(SPLIT_PAIRS):
        raise ConfigError(f"split stream supports 1..{len(SPLIT_PAIRS)} tasks, got {tasks}")
    out = []
    for k, pair in enumerate(SPLIT_PAIRS[:tasks]):
        rng = np.random.default_rng([seed, 0x5B1, k])
        tr = _limit(train.subset(np.flatnonzero(np.isin(train.labels, pair))), train_limit, rng)
        te = _limit(test.subset(np.flatnonzero(np.isin(test.labels, pair))), test_limit, rng)
        tr, va = _split_val(tr, val_fraction, rng)
        out.append(Task(f"digits{pair[0]}{pair[1]}", tr, va, te))
    return TaskStream(out, batch_size=batch_size, seed=seed, kind="split-mnist")


def fuzzy_schedule(stream: TaskStream, ramp: int) -> TaskStream:
    """Copy of ``stream`` whose task boundaries become linear mixing ramps of ``ramp`` batches.

    Batch ``b`` of a ramp holds a fraction ``(b + 1) / (ramp + 1)`` of new-task
    samples; the total number of samples is unchanged.
    """
    if ramp < 1:
        raise ConfigError(f"ramp must be at least one batch, got {ramp}")
    return replace(stream, ramp=int(ramp))
