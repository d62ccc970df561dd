"""Masked MLP: linear and batch-norm layers whose parameters are gated per task.

Every trainable tensor (linear weights, batch-norm scale and shift) has one
relevance map per task.  Training uses the soft pseudo-round gate; evaluation
uses the hard binary gate.  Parameters that a completed task's binary map
selects are frozen and receive no further updates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel
from .errors import DimensionError, StateError
from .relevance import (
    BETA_MIN,
    INIT_MEAN,
    INIT_SD,
    FrozenIndicator,
    RelevanceMap,
    binarize,
    init_map,
    update_frozen,
)

MLP_SIZES = (784, 100, 100, 100, 10)


@dataclass
class MaskedLinear:
    name: str
    weight: np.ndarray  # out x in, no bias

    @property
    def keys(self):
        return (f"{self.name}.weight",)


@dataclass
class MaskedBatchNorm:
    name: str
    scale: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @property
    def keys(self):
        return (f"{self.name}.scale", f"{self.name}.shift")


class MaskedNetwork:
    """Stack of M-Linear / M-BN / ReLU blocks ending in a linear classifier head.

    ``sizes`` lists layer widths from input to output; the standard MNIST
    network is ``(784, 100, 100, 100, 10)``.
    """

    def __init__(self, sizes=MLP_SIZES, seed=0, *, beta=BETA_MIN, map_mean=INIT_MEAN,
                 map_sd=INIT_SD, bn_eps=1e-5, bn_momentum=0.1):
        self.sizes = tuple(int(s) for s in sizes)
        self.beta = float(beta)
        self.map_mean = float(map_mean)
        self.map_sd = float(map_sd)
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))

        self.layers = []
        n = len(self.sizes) - 1
        for i in range(n):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            self.layers.append(MaskedLinear(f"fc{i + 1}", w))
            if i < n - 1:
                self.layers.append(MaskedBatchNorm(f"bn{i + 1}", np.ones(fan_out), np.zeros(fan_out),
                                                   eps=bn_eps, momentum=bn_momentum))
        self.params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if isinstance(layer, MaskedLinear):
                self.params[layer.keys[0]] = layer.weight
            else:
                self.params[layer.keys[0]] = layer.scale
                self.params[layer.keys[1]] = layer.shift
        self.frozen = {k: FrozenIndicator.empty(v.shape) for k, v in self.params.items()}
        self.maps: dict[int, dict[str, RelevanceMap]] = {}
        self.masks: dict[int, dict[str, np.ndarray]] = {}
        self.bn_stats: dict[int, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
        self.task_order: list[int] = []
        self._cache = None

    # -- registry -------------------------------------------------------------

    @property
    def weight_keys(self) -> list[str]:
        return [l.keys[0] for l in self.layers if isinstance(l, MaskedLinear)]

    @property
    def weight_count(self) -> int:
        return sum(self.params[k].size for k in self.weight_keys)

    @property
    def completed(self) -> list[int]:
        return [t for t in self.task_order if t in self.masks]

    @property
    def active(self) -> int | None:
        open_ = [t for t in self.task_order if t not in self.masks]
        return open_[-1] if open_ else None

    def add_task(self, task: int, seed=None) -> None:
        if task in self.task_order:
            raise StateError(f"task {task} already registered")
        ss = np.random.SeedSequence([int(self.seed), 0x3A9, int(task)] if seed is None else seed)
        rng = np.random.default_rng(ss)
        self.maps[task] = {k: init_map(v.shape, rng, mean=self.map_mean, sd=self.map_sd, beta=self.beta)
                           for k, v in self.params.items()}
        self.bn_stats[task] = {l.name: (np.zeros(l.scale.shape), np.ones(l.scale.shape))
                               for l in self.layers if isinstance(l, MaskedBatchNorm)}
        self.task_order.append(task)

    def _check_task(self, task):
        if task not in self.task_order:
            raise KeyError(f"unknown task id {task!r}; registered: {self.task_order}")

    def gates(self, task: int, train: bool) -> dict[str, np.ndarray]:
        self._check_task(task)
        if task in self.masks:
            return {k: m.astype(np.float64) for k, m in self.masks[task].items()}
        if train:
            return {k: m.gate() for k, m in self.maps[task].items()}
        return {k: binarize(m).astype(np.float64) for k, m in self.maps[task].items()}

    def binary_masks(self, task: int) -> dict[str, np.ndarray]:
        self._check_task(task)
        if task in self.masks:
            return self.masks[task]
        return {k: binarize(m) for k, m in self.maps[task].items()}

    # -- forward / backward ---------------------------------------------------

    def forward(self, x, task: int, train: bool = True, *, batch_stats: bool | None = None,
                update_stats: bool | None = None, keep_cache: bool | None = None) -> np.ndarray:
        """Logits for ``x`` under ``task``'s gates.

        ``train`` selects soft gates; batch-norm uses batch statistics when
        ``batch_stats`` (default: ``train``) and folds them into the task's
        running buffers when ``update_stats`` (default: ``batch_stats``).
        """
        x = kernel.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise DimensionError(f"expected input of shape (b, {self.sizes[0]}), got {x.shape}")
        batch_stats = train if batch_stats is None else batch_stats
        update_stats = batch_stats if update_stats is None else update_stats
        keep_cache = train if keep_cache is None else keep_cache
        g = self.gates(task, train)
        hard = not train or task in self.masks
        stats = self.bn_stats[task]
        caches = []
        h = x
        for layer in self.layers:
            if isinstance(layer, MaskedLinear):
                gate = g[layer.keys[0]]
                # hard gates select weights exactly (no -0.0 from sign * 0)
                w_eff = np.where(gate != 0.0, layer.weight, 0.0) if hard else layer.weight * gate
                caches.append((h, gate, w_eff))
                h = h @ w_eff.T
            else:
                ks, kb = layer.keys
                if hard:
                    scale = np.where(g[ks] != 0.0, layer.scale, 0.0)
                    shift = np.where(g[kb] != 0.0, layer.shift, 0.0)
                else:
                    scale, shift = layer.scale * g[ks], layer.shift * g[kb]
                mean, var = stats[layer.name]
                if batch_stats:
                    out, c = kernel.batchnorm_train(h, scale, shift, layer.eps)
                    if update_stats:
                        m = layer.momentum
                        n = h.shape[0]
                        unbiased = c[3] * n / max(n - 1, 1)
                        stats[layer.name] = ((1 - m) * mean + m * c[2], (1 - m) * var + m * unbiased)
                else:
                    out, c = kernel.batchnorm_eval(h, scale, shift, mean, var, layer.eps)
                h = kernel.relu(out)
                caches.append((c, g[ks], g[kb], scale, out, batch_stats))
        self._cache = (task, caches, g) if keep_cache else None
        return h

    def backward(self, grad_logits, *, beta_grads: bool = False):
        """Gradients of the last cached forward pass.

        Returns ``(param_grads, map_grads)`` keyed by parameter name; map
        gradients are with respect to the raw map values.  Weight gradients
        are zeroed where frozen and map gradients where the entry was pruned.
        With ``beta_grads`` a third dict of per-map beta gradients is returned.
        """
        if self._cache is None:
            raise StateError("backward called without a preceding training forward pass")
        task, caches, gates = self._cache
        self._cache = None
        maps = self.maps.get(task) if task not in self.masks else None
        grad = kernel.as_tensor(grad_logits)
        pgrads: dict[str, np.ndarray] = {}
        ggrads: dict[str, np.ndarray] = {}
        first = self.layers[0]
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            if isinstance(layer, MaskedLinear):
                key = layer.keys[0]
                h, gate, w_eff = cache
                dw_eff = grad.T @ h
                if layer is not first:
                    grad = grad @ w_eff
                pgrads[key] = dw_eff * gate
                ggrads[key] = dw_eff * layer.weight
            else:
                c, gs, gb, scale, pre, batch_stats = cache
                grad = kernel.relu_backward(grad, pre)
                if batch_stats:
                    grad, d_scale, d_shift = kernel.batchnorm_train_backward(grad, c, scale)
                else:
                    grad, d_scale, d_shift = kernel.batchnorm_eval_backward(grad, c, scale)
                ks, kb = layer.keys
                pgrads[ks], pgrads[kb] = d_scale * gs, d_shift * gb
                ggrads[ks], ggrads[kb] = d_scale * layer.scale, d_shift * layer.shift
        for k, f in self.frozen.items():
            if f.count:
                pgrads[k][f.mask] = 0.0
        mgrads, bgrads = {}, {}
        if maps is not None:
            for k, dg in ggrads.items():
                m = maps[k]
                g = gates[k]
                slope = g * (1.0 - g)
                d_raw = dg * slope
                if beta_grads:
                    bgrads[k] = float(np.sum(d_raw * (m.raw - 0.5)))
                d_raw *= m.beta
                if m.pruned:
                    d_raw[m.raw == 0.0] = 0.0
                mgrads[k] = d_raw
        if beta_grads:
            return pgrads, mgrads, bgrads
        return pgrads, mgrads

    def update_masks(self, task: int) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Boolean masks of entries the optimiser may touch while training ``task``."""
        pm = {k: ~f.mask for k, f in self.frozen.items()}
        mm = {}
        for k, m in self.maps.get(task, {}).items():
            mm[k] = ~(m.raw == 0.0) if m.pruned else np.ones(m.raw.shape, dtype=bool)
        return pm, mm

    # -- task lifecycle -------------------------------------------------------

    def complete_task(self, task: int) -> dict[str, int]:
        """Binarise ``task``'s maps, freeze the parameters they select, drop the raw maps.

        Returns the number of newly frozen entries per parameter.
        """
        self._check_task(task)
        if task in self.masks:
            raise StateError(f"task {task} already completed")
        masks = {k: binarize(m) for k, m in self.maps[task].items()}
        added = {}
        for k, mask in masks.items():
            before = self.frozen[k].count
            self.frozen[k] = update_frozen(self.frozen[k], mask)
            added[k] = self.frozen[k].count - before
        self.masks[task] = masks
        del self.maps[task]
        return added

    # -- inference ------------------------------------------------------------

    def eval_logits(self, x, task: int, chunk: int = 4096) -> np.ndarray:
        x = kernel.as_tensor(x)
        return np.concatenate([self.forward(x[i:i + chunk], task, train=False)
                               for i in range(0, max(len(x), 1), chunk)])

    def predict(self, x, task: int) -> np.ndarray:
        return self.eval_logits(x, task).argmax(axis=1)

    def task_logit_max(self, x, tasks=None):
        """Pick, per sample, the task whose binary mask gives the most confident prediction.

        Returns ``(task_ids, logits, confidences)`` where ``confidences`` has
        one column per candidate task.  Ties go to the earliest task.
        """
        tasks = list(self.task_order if tasks is None else tasks)
        if not tasks:
            raise StateError("no registered tasks")
        all_logits = np.stack([self.eval_logits(x, t) for t in tasks])
        conf = kernel.softmax(all_logits).max(axis=-1).T
        best = conf.argmax(axis=1)
        rows = np.arange(len(best))
        return np.asarray(tasks)[best], all_logits[best, rows], conf

    def frozen_count(self) -> int:
        return sum(f.count for f in self.frozen.values())
