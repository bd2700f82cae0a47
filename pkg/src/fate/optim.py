"""SGD with momentum under a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def cosine_lr(t: int, total: int, lr0: float, eta_min: float = 0.0) -> float:
    if total <= 0:
        raise ValueError("total steps must be positive")
    t = min(max(t, 0), total)
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    total_steps: int
    lr0: float
    eta_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    t: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(self.t, self.total_steps, self.lr0, self.eta_min)


def sgd_step(state: OptimizerState, grads: dict[str, np.ndarray], params: dict[str, Tensor]) -> float:
    """Apply one momentum-SGD update in place and return the rate used.

    ``m <- momentum * m + g``; ``p <- p - lr(t) * m``. A fresh buffer starts at
    zero, so the first step is plain ``p - lr0 * g``.
    """
    if state.t >= state.total_steps:
        raise RuntimeError(f"optimizer exhausted: t={state.t} >= T={state.total_steps}")
    for name in grads:
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not params[name].trainable:
            raise ValueError(f"gradient supplied for frozen parameter {name!r}")
    lr = state.lr
    for name in sorted(grads):
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.weight_decay:
            g = g + p.dtype.type(state.weight_decay) * p.data
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
        buf = p.dtype.type(state.momentum) * buf + g
        state.buffers[name] = buf
        p.data = p.data - p.dtype.type(lr) * buf
    state.t += 1
    return lr


@dataclass
class AdamState:
    """AdamW with linear warmup into a cosine decay; used only for backbone pretraining."""

    total_steps: int
    lr0: float
    warmup: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        if self.t < self.warmup:
            return self.lr0 * (self.t + 1) / self.warmup
        return cosine_lr(self.t - self.warmup, max(1, self.total_steps - self.warmup), self.lr0)


def adamw_step(state: AdamState, grads: dict[str, np.ndarray], params: dict[str, Tensor]) -> float:
    if state.t >= state.total_steps:
        raise RuntimeError(f"optimizer exhausted: t={state.t} >= T={state.total_steps}")
    lr = state.lr
    k = state.t + 1
    c1 = 1.0 - state.beta1 ** k
    c2 = 1.0 - state.beta2 ** k
    for name in sorted(grads):
        p = params[name]
        if not p.trainable:
            raise ValueError(f"gradient supplied for frozen parameter {name!r}")
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.beta1 * state.m.get(name, 0.0) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and p.ndim > 1:
            step = step + state.weight_decay * p.data
        p.data = (p.data - lr * step).astype(p.dtype)
    state.t += 1
    return lr
