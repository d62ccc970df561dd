"""Task-by-task training with known task labels.

For each task: train weights and a fresh relevance map jointly, prune the map
once the validation loss stops improving, keep training to the epoch budget,
then binarise the map and freeze every parameter it selects.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernel
from .data import TaskStream
from .errors import ConfigError
from .metrics import RunRecord
from .network import MLP_SIZES, MaskedNetwork
from .optimizer import Adam
from .relevance import BETA_MIN, prune, sparsity

log = logging.getLogger(__name__)

SPARSITY_KINDS = ("none", "l1", "l0")
REFERENCE_EPOCHS = 250
REFERENCE_WINDOW = (20, 80)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr_w: float = 0.002
    lr_m: float = 0.002
    mu: float = 0.05
    beta: float = BETA_MIN
    learn_beta: bool = False
    sparsity: str = "l1"
    sparsity_coeff: float = 1e-5
    seed: int = 0
    patience: int = 5
    gauss_coeff: float = 0.0
    # maps start at the gate midpoint so every entry gets gradient from step one
    map_mean: float = 0.5
    map_sd: float = 0.05

    def __post_init__(self):
        if self.sparsity == "l0-surrogate":
            self.sparsity = "l0"
        for name in ("epochs", "batch_size", "patience"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_w", "lr_m", "beta", "map_sd"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.mu < 1.0:
            raise ConfigError(f"mu must lie in (0, 1), got {self.mu}")
        if self.beta < BETA_MIN:
            raise ConfigError(f"beta must be at least {BETA_MIN}, got {self.beta}")
        if self.sparsity not in SPARSITY_KINDS:
            raise ConfigError(f"sparsity must be one of {SPARSITY_KINDS}, got {self.sparsity!r}")
        if self.sparsity_coeff < 0 or self.gauss_coeff < 0:
            raise ConfigError("regulariser coefficients must be non-negative")

    def prune_window(self) -> tuple[int, int, int]:
        """Epoch window and patience for the prune trigger, scaled to the epoch budget."""
        scale = self.epochs / REFERENCE_EPOCHS
        lo = max(1, round(REFERENCE_WINDOW[0] * scale))
        hi = max(lo, round(REFERENCE_WINDOW[1] * scale))
        patience = max(1, round(self.patience * scale))
        return lo, hi, patience

    def as_dict(self) -> dict:
        return asdict(self)


def build_network(config: TrainConfig, sizes=MLP_SIZES) -> MaskedNetwork:
    return MaskedNetwork(sizes, seed=config.seed, beta=config.beta, map_mean=config.map_mean,
                         map_sd=config.map_sd)


def sparsity_loss(m, kind: str, coeff: float) -> tuple[float, np.ndarray]:
    """Penalty on a relevance map's gates and its gradient with respect to the raw values.

    ``l1`` sums the gate values; ``l0`` is the differentiable stand-in for
    the count of open gates, which for near-binary gates is the same sum.
    """
    if kind == "none" or coeff == 0.0:
        return 0.0, np.zeros_like(m.raw)
    if kind not in ("l1", "l0", "l0-surrogate"):
        raise ConfigError(f"unknown sparsity kind {kind!r}")
    g = m.gate()
    d = coeff * m.beta * g * (1.0 - g)
    if m.pruned:
        d = np.where(m.raw == 0.0, 0.0, d)
    return float(coeff * g.sum()), d


class TaskOptimizer:
    """The two Adam groups (weights, raw maps) used while one task trains."""

    def __init__(self, net: MaskedNetwork, task: int, config: TrainConfig):
        self.net, self.task, self.config = net, task, config
        self.weights = Adam(config.lr_w, name="weights")
        self.maps = Adam(config.lr_m, clip=(0.0, 1.0), name="maps")
        self.betas = Adam(config.lr_m, name="beta") if config.learn_beta else None

    def apply(self, pgrads, mgrads, bgrads=None) -> None:
        net, task = self.net, self.task
        pmask, mmask = net.update_masks(task)
        self.weights.step(net.params, pgrads, pmask)
        maps = net.maps[task]
        self.maps.step({k: m.raw for k, m in maps.items()}, mgrads, mmask)
        if self.betas is not None and bgrads:
            cur = {k: np.array([m.beta]) for k, m in maps.items()}
            self.betas.step(cur, {k: np.array([g]) for k, g in bgrads.items()})
            for k, m in maps.items():
                m.beta = max(m.beta, float(cur[k][0]))  # tightening only

    def state_dict(self) -> dict:
        return {"weights": self.weights.state_dict(), "maps": self.maps.state_dict()}


def train_step(net: MaskedNetwork, opt: TaskOptimizer, x, y, config: TrainConfig) -> float:
    """One forward/backward/update on a labelled batch under the training task's map."""
    task = opt.task
    logits = net.forward(x, task, train=True)
    loss, grad = kernel.softmax_xent(logits, y)
    out = net.backward(grad, beta_grads=config.learn_beta)
    pgrads, mgrads = out[0], out[1]
    if config.sparsity != "none" and config.sparsity_coeff > 0:
        for k, m in net.maps[task].items():
            if k in net.weight_keys:
                sl, sg = sparsity_loss(m, config.sparsity, config.sparsity_coeff)
                loss += sl
                mgrads[k] = mgrads[k] + sg
    opt.apply(pgrads, mgrads, out[2] if config.learn_beta else None)
    return loss


def gaussian_step(net: MaskedNetwork, opt: TaskOptimizer, shape, rng, coeff: float) -> float:
    """Push logits on standard-normal inputs towards zero with a separate optimiser step.

    Batch-norm runs on the task's running statistics and leaves them untouched,
    so noise never leaks into the task's stored normalisation.
    """
    if coeff == 0.0:
        return 0.0
    xg = rng.standard_normal(shape)
    logits = net.forward(xg, opt.task, train=True, batch_stats=False)
    loss, grad = kernel.l2_to_zero(logits)
    scale = coeff / shape[0]
    out = net.backward(grad * scale, beta_grads=opt.config.learn_beta)
    opt.apply(out[0], out[1], out[2] if opt.config.learn_beta else None)
    return loss * scale


def dataset_loss(net: MaskedNetwork, task: int, data, chunk=4096) -> float:
    total, n = 0.0, len(data)
    for i in range(0, n, chunk):
        x, y = data.take(np.arange(i, min(i + chunk, n)))
        loss, _ = kernel.softmax_xent(net.eval_logits(x, task), y)
        total += loss * len(y)
    return total / max(n, 1)


def evaluate(net: MaskedNetwork, task: int, data) -> float:
    """Accuracy of the binary-masked network for ``task`` on ``data``."""
    net._check_task(task)
    if len(data) == 0:
        return float("nan")
    x, y = data.take(np.arange(len(data)))
    return float(np.mean(net.predict(x, task) == y))


@dataclass
class TaskReport:
    task: int
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    prune_epoch: int | None = None
    frozen_added: int = 0
    accuracy: float = float("nan")


def train_task(net: MaskedNetwork, stream: TaskStream, task: int, config: TrainConfig,
               record: RunRecord | None = None, finish: bool = True) -> TaskReport:
    """Train ``task`` to its epoch budget, pruning its map at the convergence trigger."""
    if task not in net.task_order:
        net.add_task(task)
    opt = TaskOptimizer(net, task, config)
    rng = np.random.default_rng([config.seed, 0x6A55, task])
    lo, hi, patience = config.prune_window()
    report = TaskReport(task)
    data = stream.tasks[task]
    best, bad = np.inf, 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for x, y in stream.epoch_batches(task, epoch - 1):
            losses.append(train_step(net, opt, x, y, config))
            gaussian_step(net, opt, x.shape, rng, config.gauss_coeff)
        train_loss = float(np.mean(losses))
        val_loss = dataset_loss(net, task, data.val) if len(data.val) else train_loss
        if val_loss < best:
            best, bad = val_loss, 0
        else:
            bad += 1
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        if record is not None:
            record.append("epoch", task=task, epoch=epoch, train_loss=train_loss, val_loss=val_loss)
            record.timing(f"task{task}/epoch{epoch}", time.perf_counter() - t0)
        if report.prune_epoch is None and epoch >= lo and (bad >= patience or epoch >= hi):
            _prune_task(net, task, config.mu)
            report.prune_epoch = epoch
            if record is not None:
                record.append("prune", task=task, epoch=epoch, mu=config.mu)
    if report.prune_epoch is None:
        log.warning("task %d: prune trigger not reached within %d epochs; pruning at the end",
                    task, config.epochs)
        _prune_task(net, task, config.mu)
        report.prune_epoch = config.epochs
        if record is not None:
            record.append("prune", task=task, epoch=config.epochs, mu=config.mu)
    if finish:
        report.frozen_added = sum(net.complete_task(task).values())
    report.accuracy = evaluate(net, task, data.test)
    return report


def _prune_task(net: MaskedNetwork, task: int, mu: float) -> None:
    net.maps[task] = {k: prune(m, mu) for k, m in net.maps[task].items()}


def weight_sparsity(net: MaskedNetwork) -> float:
    keys = net.weight_keys
    maps = [[net.binary_masks(t)[k] for k in keys] for t in net.task_order]
    return sparsity(maps, net.weight_count) if maps else 1.0


@dataclass
class RunResult:
    net: MaskedNetwork
    reports: list
    accuracy_matrix: np.ndarray  # row t: accuracies on tasks 0..t after training task t
    record: RunRecord | None = None

    @property
    def final_accuracies(self) -> np.ndarray:
        return self.accuracy_matrix[-1]

    @property
    def mean_accuracy(self) -> float:
        return float(np.nanmean(self.accuracy_matrix[-1]))


def run_supervised(stream: TaskStream, config: TrainConfig, record: RunRecord | None = None,
                   net: MaskedNetwork | None = None, on_task_end=None) -> RunResult:
    """Train every task of ``stream`` in order, evaluating all tasks seen so far after each."""
    net = net or build_network(config)
    n = len(stream)
    acc = np.full((n, n), np.nan)
    reports = []
    for t in range(n):
        if t in net.completed:
            for i in range(t + 1):
                acc[t, i] = evaluate(net, i, stream.tasks[i].test)
            continue
        t0 = time.perf_counter()
        rep = train_task(net, stream, t, config, record)
        reports.append(rep)
        for i in range(t + 1):
            acc[t, i] = evaluate(net, i, stream.tasks[i].test)
        if record is not None:
            record.append("task_end", task=t, accuracies=[float(a) for a in acc[t, :t + 1]],
                          sparsity=weight_sparsity(net), frozen=net.frozen_count(),
                          frozen_added=rep.frozen_added, prune_epoch=rep.prune_epoch)
            record.timing(f"task{t}", time.perf_counter() - t0)
        if on_task_end is not None:
            on_task_end(net, t)
    return RunResult(net, reports, acc, record)
