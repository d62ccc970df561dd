"""Adam with per-entry update masks, plus a plateau learning-rate decay hook."""
from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Entries excluded by ``masks`` keep both their value and their moment
    estimates untouched.  ``clip`` bounds every parameter after the update,
    which is how relevance maps stay inside [0, 1].
    """

    def __init__(self, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8, clip=None, name="adam"):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.name = name
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, masks: dict | None = None) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise FloatingPointError(
                    f"{self.name}: non-finite gradient for '{k}' at step {self.t} ({bad} entries)")
            p = params[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            mask = None if masks is None else masks.get(k)
            if mask is not None and mask.all():
                mask = None
            if mask is None:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                step = np.sqrt(v / c2)
                step += self.eps
                np.divide(m, step, out=step)
                step *= self.lr / c1
                p -= step
                if self.clip is not None:
                    np.clip(p, *self.clip, out=p)
            else:
                m_new = b1 * m + (1.0 - b1) * g
                v_new = b2 * v + (1.0 - b2) * (g * g)
                p_new = p - (self.lr / c1) * m_new / (np.sqrt(v_new / c2) + self.eps)
                if self.clip is not None:
                    np.clip(p_new, *self.clip, out=p_new)
                np.copyto(m, m_new, where=mask)
                np.copyto(v, v_new, where=mask)
                np.copyto(p, p_new, where=mask)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.t = int(state["t"])
        self.m = {k: np.array(a, dtype=np.float64) for k, a in state["m"].items()}
        self.v = {k: np.array(a, dtype=np.float64) for k, a in state["v"].items()}


class PlateauDecay:
    """Divide the learning rate of each optimiser by ``factor`` after ``patience``
    epochs without validation-loss improvement."""

    def __init__(self, optimizers, factor=3.0, patience=5):
        self.optimizers = list(optimizers)
        self.factor = factor
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for opt in self.optimizers:
                opt.lr /= self.factor
            self.bad_epochs = 0
            return True
        return False
