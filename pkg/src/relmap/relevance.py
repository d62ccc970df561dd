"""Relevance maps: soft gates over weight tensors, pruning, binarisation and freezing."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, InputError

BETA_MIN = 80.0
INIT_MEAN = 0.3
INIT_SD = 0.2


def pseudo_round(x, beta):
    """Sigmoid centred at 0.5 whose tightness ``beta`` approaches rounding as it grows."""
    return expit(beta * (np.asarray(x, dtype=np.float64) - 0.5))


def pseudo_round_grad(x, beta):
    """Derivative of :func:`pseudo_round` with respect to ``x``."""
    g = pseudo_round(x, beta)
    return beta * g * (1.0 - g)


@dataclass
class RelevanceMap:
    raw: np.ndarray
    beta: float = BETA_MIN
    pruned: bool = False

    @property
    def shape(self):
        return self.raw.shape

    def gate(self) -> np.ndarray:
        return pseudo_round(self.raw, self.beta)

    def binary(self) -> np.ndarray:
        return binarize(self)

    def copy(self) -> "RelevanceMap":
        return replace(self, raw=self.raw.copy())


@dataclass
class FrozenIndicator:
    """Cumulative record of parameters that earlier tasks depend on; True means fixed."""

    mask: np.ndarray

    @classmethod
    def empty(cls, shape) -> "FrozenIndicator":
        return cls(np.zeros(shape, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def init_map(shape, seed=None, *, mean=INIT_MEAN, sd=INIT_SD, beta=BETA_MIN) -> RelevanceMap:
    """Draw raw values from normal(mean, sd) clipped to [0, 1].

    ``seed`` may be an int, a SeedSequence or an existing Generator.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    raw = np.clip(rng.normal(mean, sd, size=shape), 0.0, 1.0)
    return RelevanceMap(raw=raw, beta=float(beta))


def prune(m: RelevanceMap, mu: float) -> RelevanceMap:
    """Zero every raw entry ``<= mu``; larger entries are left as they are."""
    if not 0.0 < mu < 1.0:
        raise ConfigError(f"prune threshold must lie in (0, 1), got {mu}")
    raw = np.where(m.raw <= mu, 0.0, m.raw)
    return replace(m, raw=raw, pruned=True)


def binarize(m: RelevanceMap) -> np.ndarray:
    # ties at exactly 0.5 go to 1
    return pseudo_round(m.raw, m.beta) >= 0.5


def update_frozen(frozen: FrozenIndicator, m) -> FrozenIndicator:
    mask = m.binary() if isinstance(m, RelevanceMap) else np.asarray(m, dtype=bool)
    if mask.shape != frozen.mask.shape:
        raise DimensionError(f"frozen indicator {frozen.mask.shape} vs map {mask.shape}")
    return FrozenIndicator(frozen.mask | mask)


def _flat_binary(entry) -> np.ndarray:
    if isinstance(entry, RelevanceMap):
        return entry.binary().ravel()
    if isinstance(entry, np.ndarray):
        return entry.astype(bool).ravel()
    return np.concatenate([_flat_binary(e) for e in entry])


def sparsity(maps: Sequence, weight_count: int) -> float:
    """Fraction of weight positions switched off in every task's binary map.

    Each element of ``maps`` describes one task: a binary array, a
    :class:`RelevanceMap`, or a sequence of either (concatenated in order).
    """
    if len(maps) == 0:
        raise InputError("sparsity needs at least one task map")
    used = np.zeros(weight_count, dtype=bool)
    for task in maps:
        flat = _flat_binary(task)
        if flat.size != weight_count:
            raise DimensionError(f"map has {flat.size} entries, expected {weight_count}")
        used |= flat
    return float(weight_count - used.sum()) / weight_count


@dataclass
class Footprint:
    tasks: int
    weight_count: int
    weight_bytes: int
    mask_bytes: int
    removable_weights: int
    per_task_mask_bytes: int = field(init=False)

    def __post_init__(self):
        self.per_task_mask_bytes = (self.weight_count + 7) // 8

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.mask_bytes

    @property
    def pruned_total_bytes(self) -> int:
        """Footprint once never-used weights are dropped."""
        return self.total_bytes - self.removable_weights * (self.weight_bytes // max(self.weight_count, 1))


def memory_footprint(maps: Sequence, weight_count: int, bytes_per_weight: int = 8) -> Footprint:
    """Storage for dense weights plus one bit per mask entry per task."""
    t = len(maps)
    removable = int(round(sparsity(maps, weight_count) * weight_count)) if t else weight_count
    return Footprint(
        tasks=t,
        weight_count=weight_count,
        weight_bytes=weight_count * bytes_per_weight,
        mask_bytes=t * ((weight_count + 7) // 8),
        removable_weights=removable,
    )
