"""Adam optimizer with bias correction and a warmup/decay LR schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DataError, NumericalError


@dataclass(frozen=True)
class LrSchedule:
    """Linear ramp 0 -> peak over `warmup_updates`, then peak * decay^epoch."""

    peak_lr: float = 1e-3
    warmup_updates: int = 500
    decay_per_epoch: float = 0.98

    def __post_init__(self) -> None:
        if self.peak_lr <= 0:
            raise DataError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.warmup_updates < 1:
            raise DataError(f"warmup_updates must be >= 1, got {self.warmup_updates}")
        if not (0 < self.decay_per_epoch <= 1):
            raise DataError(f"decay_per_epoch must be in (0, 1], got {self.decay_per_epoch}")


def lr_at(schedule: LrSchedule, update_index: int, epoch_index: int) -> float:
    """Learning rate for a global update counter and the current epoch."""
    if update_index < 0 or epoch_index < 0:
        raise DataError("indices must be >= 0")
    if update_index < schedule.warmup_updates:
        return schedule.peak_lr * (update_index + 1) / schedule.warmup_updates
    return schedule.peak_lr * schedule.decay_per_epoch**epoch_index


@dataclass
class AdamState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One Adam update in place; a None gradient is treated as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise DataError("adam_step: params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for parameter {i} at step {t}")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class Adam:
    """Object wrapper tying an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
