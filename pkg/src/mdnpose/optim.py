"""Adam with a continuous exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numba
import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .nn import max_norm_project
from .tensor import Tensor


@dataclass
class LrSchedule:
    base_lr: float = 1e-3
    decay_rate: float = 0.96
    decay_steps: int = 100_000

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base learning rate must be positive, got {self.base_lr}")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError(f"decay rate must lie in (0, 1], got {self.decay_rate}")
        if self.decay_steps <= 0:
            raise ConfigError(f"decay steps must be positive, got {self.decay_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    return schedule.base_lr * schedule.decay_rate ** (step / schedule.decay_steps)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kwargs)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("parameter, gradient and moment lists differ in length")
    for p, g in zip(params, grads):
        if g is not None and g.shape != p.data.shape:
            raise DimensionError(f"gradient for {p.name} has shape {g.shape}, expected {p.data.shape}")
        if g is not None and not _grad_finite(np.ascontiguousarray(g).reshape(-1)):
            raise NumericError(f"non-finite gradient for parameter {p.name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        _adam_kernel(p.data.reshape(-1), np.ascontiguousarray(g).reshape(-1), state.m[i].reshape(-1),
                     state.v[i].reshape(-1), b1, b2, c1, c2, state.epsilon, lr)


def _grad_finite(flat: np.ndarray) -> bool:
    # a BLAS dot is the fast path; only an overflowing or non-finite result needs the exact scan
    return bool(np.isfinite(np.dot(flat, flat))) or _all_finite(flat)


@numba.njit(cache=True)
def _all_finite(a):  # pragma: no cover - compiled
    for i in range(a.size):
        if not np.isfinite(a[i]):
            return False
    return True


@numba.njit(fastmath=True, cache=True)
def _adam_kernel(p, g, m, v, b1, b2, c1, c2, eps, lr):  # pragma: no cover - compiled
    step = lr / c1
    inv_c2 = 1.0 / c2
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi * inv_c2) + eps)


@dataclass
class Adam:
    """Convenience wrapper binding parameters, state and schedule."""

    params: List[Tensor]
    schedule: LrSchedule = field(default_factory=LrSchedule)
    state: AdamState = None

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params)

    @property
    def lr(self) -> float:
        return lr_at(self.schedule, self.state.step)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr)


def apply_constraints(model, max_norm: float = 1.0) -> None:
    """Project every linear layer's weight columns onto the max-norm ball."""
    for layer in model.linear_layers():
        max_norm_project(layer, max_norm)
