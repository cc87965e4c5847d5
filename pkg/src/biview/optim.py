"""SGD with classical momentum and decoupled-from-nothing L2, plus the cosine schedule.

Update rule (per parameter):
    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import DTYPE, Tensor
from .errors import NumericalError, ShapeError


@dataclass
class OptimState:
    """Hyperparameters plus per-parameter velocity buffers."""

    lr0: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             state: OptimState, lr: float) -> dict[str, Tensor]:
    """Apply one SGD step in place; returns `params` for convenience.

    A NaN/Inf gradient aborts the whole step (no parameter is touched) and
    reports the offending parameter by name.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NumericalError(f"sgd_step: non-finite gradient for parameter {name!r}")
    lr32 = DTYPE(lr)
    wd32 = DTYPE(state.weight_decay)
    mu32 = DTYPE(state.momentum)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} does not match parameter shape {p.data.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu32 * v + g.astype(DTYPE, copy=False)
        if state.weight_decay:
            v = v + wd32 * p.data
        state.velocity[name] = v
        p.data = p.data - lr32 * v
    return params


class SGD:
    """Object wrapper binding an OptimState to a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr0: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = dict(params)
        self.state = OptimState(lr0=lr0, weight_decay=weight_decay, momentum=momentum)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        sgd_step(self.params, grads, self.state, self.state.lr0 if lr is None else lr)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from lr0 to 0 with no warmup; clamps past the end."""
    if total_steps <= 0:
        raise ValueError(f"cosine_lr: total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ValueError(f"cosine_lr: step must be non-negative, got {step}")
    if step > total_steps:
        step = total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
