"""Adam with bias correction, plus the two learning-rate schedules used by
the training loops (cosine annealing with warm restarts, and step decay)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .tensor import Parameter

__all__ = ["AdamState", "init_adam", "adam_step", "CosineAnnealing", "StepDecay", "lr_at"]


@dataclass
class TrainHistory:
    """Per-epoch traces recorded by the training loops."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    best_epoch: int = -1


@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def init_adam(
    params: Sequence[Parameter],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """One in-place Adam update from the parameters' current gradients."""
    if lr <= 0.0:
        raise ValueError(f"adam_step: learning rate must be positive, got {lr}")
    if len(state.m) != len(params):
        raise ValueError(
            f"adam_step: state tracks {len(state.m)} parameters, got {len(params)}"
        )
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter {p.name!r} has no gradient buffer")
        if g.shape != p.data.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}"
            )
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class CosineAnnealing:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * (epoch mod period) / period)) / 2."""

    lr0: float
    period: int
    lr_min: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError(f"cosine annealing: period must be positive, got {self.period}")
        if self.lr0 <= self.lr_min:
            raise ValueError("cosine annealing: need lr0 > lr_min")


@dataclass(frozen=True)
class StepDecay:
    """lr0 * factor ** floor(epoch / every)."""

    lr0: float
    factor: float
    every: int

    def __post_init__(self):
        if self.every <= 0:
            raise ValueError(f"step decay: 'every' must be positive, got {self.every}")
        if not 0.0 < self.factor <= 1.0:
            raise ValueError(f"step decay: factor must be in (0, 1], got {self.factor}")
        if self.lr0 <= 0.0:
            raise ValueError(f"step decay: lr0 must be positive, got {self.lr0}")


Schedule = Union[CosineAnnealing, StepDecay]


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a (0-based) epoch; always strictly positive."""
    if epoch < 0:
        raise ValueError(f"lr_at: epoch must be non-negative, got {epoch}")
    if isinstance(schedule, CosineAnnealing):
        phase = epoch % schedule.period
        lr = schedule.lr_min + (schedule.lr0 - schedule.lr_min) * (
            1.0 + math.cos(math.pi * phase / schedule.period)
        ) / 2.0
    elif isinstance(schedule, StepDecay):
        lr = schedule.lr0 * schedule.factor ** (epoch // schedule.every)
    else:
        raise TypeError(f"lr_at: unknown schedule type {type(schedule).__name__}")
    if lr <= 0.0:
        raise ValueError(f"lr_at: schedule emitted a non-positive rate {lr} at epoch {epoch}")
    return lr
