"""SGD with momentum and weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from .core import Parameter


def cosine_lr(epoch: float, lr_max: float = 1e-2, lr_min: float = 1e-4, total_epochs: int = 150) -> float:
    """Cosine annealing from ``lr_max`` at epoch 0 to ``lr_min`` at ``total_epochs`` (no restart)."""
    t = min(max(epoch, 0.0), total_epochs)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total_epochs))


@dataclass
class OptimizerState:
    momentum_coefficient: float = 0.9
    weight_decay: float = 5e-4
    learning_rate_max: float = 1e-2
    learning_rate_min: float = 1e-4
    total_epochs: int = 150
    velocity: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def learning_rate(self, epoch: float) -> float:
        return cosine_lr(epoch, self.learning_rate_max, self.learning_rate_min, self.total_epochs)


def sgd_step(params: Iterable[Parameter], state: OptimizerState, lr: float) -> None:
    """One in-place SGD update. Frozen parameters and parameters without a gradient are skipped."""
    mu, wd = state.momentum_coefficient, state.weight_decay
    for p in params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad
        if wd:
            g = g + wd * p.data
        v = state.velocity.get(id(p))
        if v is None:
            v = g.copy()
        else:
            v *= mu
            v += g
        state.velocity[id(p)] = v
        p.data -= (lr * v).astype(p.dtype, copy=False)


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


class SGD:
    """Thin stateful wrapper around `sgd_step` driven by an epoch-indexed schedule."""

    def __init__(self, params: List[Parameter], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def step(self, epoch: float) -> float:
        lr = self.state.learning_rate(epoch)
        sgd_step(self.params, self.state, lr)
        return lr

    def zero_grad(self) -> None:
        zero_grad(self.params)
