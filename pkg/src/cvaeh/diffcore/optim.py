from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def adam_step(params: list[Tensor], state: AdamState, allow_missing: bool = False) -> None:
    """One bias-corrected Adam update, then zero the gradients.

    A parameter without a gradient is an error unless ``allow_missing``, in
    which case it is treated as having a zero gradient.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError(f"optimizer tracks {len(state.m)} tensors, got {len(params)}")
    for i, p in enumerate(params):
        if p.grad is None and not allow_missing:
            raise MissingGradError(f"parameter {i} ({p.name or p.shape}) has no gradient")
        if state.m[i].shape != p.shape:
            raise ValueError(f"moment buffer {i} shape {state.m[i].shape} != parameter {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else 0.0
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


@dataclass
class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` iterations without improvement.

    Improvement means a validation loss below ``best - threshold``.
    """

    factor: float = 0.5
    patience: int = 2000
    threshold: float = 1e-4
    best: float = math.inf
    since_improvement: int = 0
    num_decays: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"decay factor must lie in (0, 1), got {self.factor}")


def plateau_update(schedule: PlateauSchedule, state: AdamState, validation_loss: float,
                   iterations: int = 1) -> float:
    """Record a validation loss covering ``iterations`` training iterations; return the lr."""
    if math.isnan(validation_loss):
        raise ValueError("plateau_update: validation loss is NaN")
    if validation_loss < schedule.best - schedule.threshold:
        schedule.best = validation_loss
        schedule.since_improvement = 0
        return state.lr
    schedule.since_improvement += iterations
    while schedule.since_improvement >= schedule.patience:
        state.lr *= schedule.factor
        schedule.num_decays += 1
        schedule.since_improvement -= schedule.patience
    return state.lr
