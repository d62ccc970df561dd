"""Continual learning from a stream without task labels.

A Welch t-test on a per-batch novelty statistic decides when a new task has
started.  Samples that an already finished task claims with high confidence
are filtered out of training, each training batch is followed by an update
that drives logits on Gaussian noise towards zero, and at test time the task
is inferred as the mask giving the most confident prediction.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from . import kernel
from .data import TaskStream
from .errors import ConfigError, InputError, RunawayDetectionError
from .metrics import RunRecord
from .network import MaskedNetwork
from .relevance import INIT_MEAN, INIT_SD
from .supervised import (
    TaskOptimizer,
    TrainConfig,
    _prune_task,
    build_network,
    evaluate,
    gaussian_step,
    train_step,
    weight_sparsity,
)


@dataclass
class UnsupervisedConfig(TrainConfig):
    window: int = 20
    p_threshold: float = 1e-5
    dwell: int = 40
    min_effect: float = 0.2
    arm_below: float | None = 0.2
    tau: float = 0.99999
    gauss_coeff: float = 0.0
    max_tasks: int = 20
    rollback: bool = True
    # slow maps: a map that fits new data within a window hides the switch from the detector
    map_mean: float = INIT_MEAN
    map_sd: float = INIT_SD
    sparsity: str = "none"
    sparsity_coeff: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if self.window < 2 or self.dwell < 0:
            raise ConfigError("detector window must be >= 2 and dwell >= 0")
        if not 0.0 < self.p_threshold < 1.0 or not 0.0 < self.tau < 1.0:
            raise ConfigError("p_threshold and tau must lie in (0, 1)")
        if self.max_tasks < 1:
            raise ConfigError("max_tasks must be positive")


# -- statistics ----------------------------------------------------------------


def novelty_stat(net: MaskedNetwork, x, task: int | None = None) -> float:
    """Mean of -log(max softmax probability) under ``task``'s binary mask."""
    task = net.task_order[-1] if task is None else task
    logp = kernel.log_softmax(net.eval_logits(x, task))
    return float(np.mean(-logp.max(axis=1)))


def welch_t(a, b) -> tuple[float, float]:
    """Welch's unequal-variance t statistic of ``mean(a) - mean(b)`` and its two-sided p-value.

    Returns ``(nan, nan)`` when both samples have zero variance.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise InputError(f"welch_t needs at least two values per sample, got {na} and {nb}")
    sa = a.var(ddof=1) / na
    sb = b.var(ddof=1) / nb
    se2 = sa + sb
    if se2 == 0.0:
        return float("nan"), float("nan")
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    # in terms of variance shares, so tiny variances do not underflow when squared
    ra, rb = sa / se2, sb / se2
    df = 1.0 / (ra * ra / (na - 1) + rb * rb / (nb - 1))
    p = 2.0 * stdtr(df, -abs(t))
    return float(t), float(min(p, 1.0))


@dataclass
class Detector:
    """Two adjacent sliding windows of per-batch statistics.

    Fires when both windows are full, at least ``dwell`` batches have passed
    since the last reset, the current window's mean exceeds the reference
    window's by more than ``min_effect``, and Welch's test gives
    ``p < threshold``.  With ``arm_below`` set, it also requires the
    reference mean to be below that level, i.e. the current task to have
    been learned before a switch away from it can be declared.
    """

    window: int = 20
    threshold: float = 1e-5
    dwell: int = 40
    min_effect: float = 0.0
    arm_below: float | None = None
    history: deque = field(default_factory=deque)
    since_reset: int = 0
    last_t: float = float("nan")
    last_p: float = float("nan")

    def reset(self) -> None:
        self.history.clear()
        self.since_reset = 0

    def push(self, stat: float) -> bool:
        self.history.append(float(stat))
        if len(self.history) > 2 * self.window:
            self.history.popleft()
        self.since_reset += 1
        self.last_t = self.last_p = float("nan")
        if len(self.history) < 2 * self.window or self.since_reset < self.dwell:
            return False
        h = list(self.history)
        ref, cur = h[:self.window], h[self.window:]
        t, p = welch_t(cur, ref)
        self.last_t, self.last_p = t, p
        if np.isnan(p) or not t > 0.0 or not p < self.threshold:
            return False
        ref_mean = float(np.mean(ref))
        if not float(np.mean(cur)) - ref_mean > self.min_effect:
            return False
        if self.arm_below is not None and not ref_mean < self.arm_below:
            return False
        self.reset()
        return True


def tsd(state: Detector, stat: float) -> bool:
    return state.push(stat)


# -- filtering and regularisation ---------------------------------------------


def filter_batch(net: MaskedNetwork, x, tau: float, tasks=None, current: int | None = None):
    """Split a batch into samples no finished task recognises and samples some task claims.

    Returns ``(retained, claims)``: a boolean mask over the batch and an int
    array holding, per sample, the claiming task id or -1.  A sample is
    claimed by the finished task with the highest max-softmax confidence
    when that confidence exceeds ``tau``.  When ``current`` names the task
    in training, a finished task must also be strictly more confident than
    ``current`` to claim the sample.
    """
    x = kernel.as_tensor(x)
    tasks = net.completed if tasks is None else list(tasks)
    claims = np.full(len(x), -1, dtype=np.int64)
    if not tasks or len(x) == 0:
        return np.ones(len(x), dtype=bool), claims
    ids, _, conf = net.task_logit_max(x, tasks)
    top = conf.max(axis=1)
    hit = top > tau
    if current is not None:
        own = kernel.softmax(net.eval_logits(x, current)).max(axis=1)
        hit &= top > own
    claims[hit] = ids[hit]
    return ~hit, claims


def gaussian_regularize(net: MaskedNetwork, opt: TaskOptimizer, batch_shape, rng, coeff=1.0) -> float:
    """Standard-normal inputs of ``batch_shape`` are pushed towards all-zero logits.

    Runs as its own optimiser step; returns the (scaled) loss.
    """
    return gaussian_step(net, opt, batch_shape, rng, coeff)


def infer_task(net: MaskedNetwork, x, tasks=None) -> np.ndarray:
    """Per-sample task id chosen by maximum confidence over finished masks."""
    tasks = net.completed if tasks is None else tasks
    return net.task_logit_max(x, tasks or None)[0]


def inferred_accuracy(net: MaskedNetwork, x, y, tasks=None) -> tuple[float, np.ndarray]:
    """Class accuracy when each sample is classified under its inferred task's mask."""
    ids, logits, _ = net.task_logit_max(x, tasks or net.completed or None)
    return float(np.mean(logits.argmax(axis=1) == y)), ids


# -- the stream trainer --------------------------------------------------------


@dataclass
class Detection:
    batch: int
    t: float
    p: float
    est_tasks: int


@dataclass
class UnsupervisedResult:
    net: MaskedNetwork
    detections: list
    boundaries: list  # ground-truth first batch of each new task
    segment_counts: np.ndarray  # detected task x true task trained-sample counts
    alignment: dict  # true task -> detected task
    aligned_accuracies: list
    inferred_accuracies: list
    claimed_fraction: float
    record: RunRecord | None = None

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.aligned_accuracies))

    @property
    def mean_inferred_accuracy(self) -> float:
        return float(np.mean(self.inferred_accuracies))


def _snapshot(net: MaskedNetwork, task: int):
    return ({k: v.copy() for k, v in net.params.items()},
            {k: m.copy() for k, m in net.maps[task].items()},
            dict(net.bn_stats[task]))


def _restore(net: MaskedNetwork, task: int, snap) -> None:
    params, maps, stats = snap
    for k, v in params.items():
        net.params[k][...] = v
    net.maps[task] = maps
    net.bn_stats[task] = stats


def _align(counts: np.ndarray) -> dict:
    """Map each true task to the detected task that trained on most of its samples."""
    return {int(t): int(counts[:, t].argmax()) for t in range(counts.shape[1]) if counts[:, t].sum()}


def run_unsupervised(stream: TaskStream, config: UnsupervisedConfig, record: RunRecord | None = None,
                     net: MaskedNetwork | None = None) -> UnsupervisedResult:
    """Train on the label-free stream, opening a new relevance map at each detected task switch.

    Labels ``y`` are used for the classification loss only; task identities
    are kept solely for evaluation and auditing.
    """
    net = net or build_network(config)
    n_true = len(stream)
    boundaries = stream.boundaries(config.epochs)
    if record is not None:
        record.append("stream", batches=len(stream.provenance(config.epochs)), boundaries=boundaries,
                      ramp=stream.ramp, tasks=n_true)
    est = 0
    net.add_task(est)
    opt = TaskOptimizer(net, est, config)
    det = Detector(config.window, config.p_threshold, config.dwell, config.min_effect, config.arm_below)
    snaps: deque = deque(maxlen=2 * config.window)  # back to the reference window's start
    rng = np.random.default_rng([config.seed, 0x6A55, 0xF00D])
    counts = np.zeros((1, n_true), dtype=np.int64)
    detections: list[Detection] = []
    seen = claimed = 0
    losses: list[float] = []
    t0 = time.perf_counter()

    def finalize(task):
        _prune_task(net, task, config.mu)
        added = net.complete_task(task)
        return sum(added.values())

    for b, batch in enumerate(stream.stream(config.epochs)):
        keep, claims = filter_batch(net, batch.x, config.tau, current=est)
        seen += len(keep)
        claimed += int((~keep).sum())
        if keep.sum() < 2:
            continue
        x, y, tids = batch.x[keep], batch.y[keep], batch.task_ids[keep]
        stat = novelty_stat(net, x, est)
        if config.rollback:
            snaps.append(_snapshot(net, est))
        if det.push(stat):
            if len(detections) + 1 >= config.max_tasks:
                raise RunawayDetectionError(
                    f"{len(detections) + 1} task switches detected by batch {b}; limit is {config.max_tasks}")
            if config.rollback and snaps:
                _restore(net, est, snaps[0])
            frozen_added = finalize(est)
            detections.append(Detection(b, det.last_t, det.last_p, est + 2))
            if record is not None:
                record.append("detection", batch=b, t=det.last_t, p_value=det.last_p, est_tasks=est + 2,
                              frozen_added=frozen_added)
                _record_segment(record, net, stream, counts, est)
            snaps.clear()
            est += 1
            net.add_task(est)
            opt = TaskOptimizer(net, est, config)
            counts = np.vstack([counts, np.zeros((1, n_true), dtype=np.int64)])
            keep, claims = filter_batch(net, batch.x, config.tau, current=est)
            claimed += int((~keep).sum())
            if keep.sum() < 2:
                continue
            x, y, tids = batch.x[keep], batch.y[keep], batch.task_ids[keep]
        losses.append(train_step(net, opt, x, y, config))
        gaussian_regularize(net, opt, x.shape, rng, config.gauss_coeff)
        counts[est] += np.bincount(tids, minlength=n_true)
        if record is not None and (b + 1) % 500 == 0:
            record.append("progress", batch=b, est_task=est, mean_loss=float(np.mean(losses[-500:])),
                          novelty=stat)
    finalize(est)
    if record is not None:
        _record_segment(record, net, stream, counts, est)
        record.timing("stream", time.perf_counter() - t0)

    alignment = _align(counts)
    aligned = []
    inferred = []
    for t in range(n_true):
        test = stream.tasks[t].test
        k = alignment.get(t)
        aligned.append(evaluate(net, k, test) if k is not None else 0.0)
        xt, yt = test.take(np.arange(len(test)))
        inferred.append(inferred_accuracy(net, xt, yt)[0])
    result = UnsupervisedResult(net, detections, boundaries, counts, alignment, aligned, inferred,
                                claimed / max(seen, 1), record)
    if record is not None:
        record.append("run_end", detections=[d.batch for d in detections], boundaries=boundaries,
                      alignment=alignment, aligned_accuracies=aligned, inferred_accuracies=inferred,
                      mean_accuracy=result.mean_accuracy, mean_inferred_accuracy=result.mean_inferred_accuracy,
                      claimed_fraction=result.claimed_fraction)
    return result


def _record_segment(record, net, stream, counts, task):
    """Evaluate every finished task on the test set of the true task it mostly trained on."""
    alignment = _align(counts)
    owner = {d: t for t, d in sorted(alignment.items(), reverse=True)}
    accs = []
    for k in range(task + 1):
        t = owner.get(k, int(counts[k].argmax()))
        accs.append(evaluate(net, k, stream.tasks[t].test))
    record.append("task_end", task=task, true_task=owner.get(task, int(counts[task].argmax())),
                  accuracies=accs, sparsity=weight_sparsity(net), frozen=net.frozen_count(),
                  trained_samples=counts[task])
