"""AdamW, global-norm gradient clipping and a plateau learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .module import Parameter


@dataclass
class OptimizerState:
    lr: float = 4e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr and eps must be positive, weight_decay non-negative")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in (0, 1), got {self.betas}")


def adamw_step(params: dict[str, Parameter], state: OptimizerState) -> OptimizerState:
    """One in-place AdamW update over named parameters.

    Weight decay is decoupled: each parameter is first scaled by
    ``1 - lr*weight_decay``, then moved by the bias-corrected Adam direction.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    lr, eps = state.lr, state.eps
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    # relative slack keeps the operation idempotent under rounding
    if norm <= max_norm * (1.0 + 1e-12):
        return list(grads)
    scale = max_norm / norm
    return [g * np.asarray(scale, dtype=g.dtype) for g in grads]


def clip_grad_norm_(params, max_norm: float) -> float:
    """In-place variant over parameters; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    grads = [p.grad for p in params]
    norm = global_norm(grads)
    for p, g in zip(params, clip_global_norm(grads, max_norm)):
        p.grad = g
    return norm


@dataclass
class PlateauScheduler:
    current_lr: float
    patience: int = 5
    factor: float = 0.5
    best_loss: float = math.inf
    epochs_since_improvement: int = 0

    def step(self, validation_loss: float) -> float:
        if validation_loss < self.best_loss:
            self.best_loss = validation_loss
            self.epochs_since_improvement = 0
        else:
            self.epochs_since_improvement += 1
            if self.epochs_since_improvement >= self.patience:
                self.current_lr *= self.factor
                self.epochs_since_improvement = 0
        return self.current_lr


def plateau_step(sched: PlateauScheduler, validation_loss: float) -> PlateauScheduler:
    sched.step(validation_loss)
    return sched
