"""Adam with bias correction and a warmup + linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .numerics import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        self.param = name
        super().__init__(f"non-finite gradient for parameter {name}")


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 5e-4
    warmup: int = 1600
    total: int = 20000

    def __post_init__(self):
        if not 0 < self.warmup < self.total:
            raise ValueError("need 0 < warmup < total")


def lr_at(schedule: Schedule, step: int) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= schedule.total:
        return 0.0
    if step <= schedule.warmup:
        return schedule.peak_lr * step / schedule.warmup
    return schedule.peak_lr * (schedule.total - step) / (schedule.total - schedule.warmup)


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float | None = 5.0


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the raw norm."""
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(factor)
    return total


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float,
    config: AdamConfig = AdamConfig(),
) -> OptimState:
    """Update ``params`` in place from ``grads`` (only names present in ``grads``).

    Every gradient is checked before any parameter moves, so a rejected step
    leaves parameters and moments untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    clip_by_global_norm(grads, config.clip_norm)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name].data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= p.dtype.type(b1)
        m += p.dtype.type(1.0 - b1) * g
        v *= p.dtype.type(b2)
        v += p.dtype.type(1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        p -= (lr * update).astype(p.dtype)
    return state
