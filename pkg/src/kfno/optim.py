"""Adam / AdamW on dicts of numpy arrays, step-decay schedule, early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block: str):
        super().__init__(f"non-finite gradient in parameter block {block!r}")
        self.block = block


@dataclass
class OptimState:
    alpha: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    n: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    d: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(key)


def _adaptive_update(params, grads, state: OptimState, decay: float) -> None:
    _check_finite(grads)
    state.n += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.n
    c2 = 1.0 - b2 ** state.n
    for key, g in grads.items():
        theta = params[key]
        m = state.m.get(key)
        d = state.d.get(key)
        if m is None:
            m = np.zeros_like(theta)
            d = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        d = b2 * d + (1.0 - b2) * g * g
        state.m[key] = m
        state.d[key] = d
        if decay:
            theta = theta - state.alpha * decay * theta
        params[key] = theta - state.alpha * (m / c1) / (np.sqrt(d / c2) + state.eps)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """One Adam step, updating ``params`` and ``state`` in place.

    Blocks missing from ``grads`` are left untouched. A non-finite gradient
    aborts the step before anything is modified.
    """
    _adaptive_update(params, grads, state, 0.0)


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState) -> None:
    """Decoupled weight decay ``theta -= alpha*lambda*theta``, then the Adam update."""
    _adaptive_update(params, grads, state, state.weight_decay)


@dataclass(frozen=True)
class StepSchedule:
    alpha0: float
    step_size: int = 30
    gamma: float = 0.5


def lr_at(epoch: int, schedule: StepSchedule) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return schedule.alpha0 * schedule.gamma ** (epoch // schedule.step_size)


class EarlyStopping:
    """Patience-based stopping on a validation loss, keeping the best snapshot.

    Improvement means strictly lower loss. ``update`` returns
    ``(should_stop, best_restored)``; when stopping, the snapshot taken at
    the best epoch is handed back through :attr:`best_snapshot` and the caller
    restores it.
    """

    def __init__(self, patience: int = 30):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = -1
        self.best_snapshot = None
        self.bad_epochs = 0
        self.epoch = -1

    def update(self, val_loss: float, snapshot=None) -> tuple[bool, bool]:
        if not math.isfinite(val_loss):
            raise ValueError(f"validation loss is not finite: {val_loss}")
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.best_snapshot = snapshot() if callable(snapshot) else snapshot
            self.bad_epochs = 0
            return False, False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            return True, self.best_snapshot is not None
        return False, False
