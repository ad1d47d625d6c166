from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update of every array in ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_by_global_norm(grads: dict, max_norm: float | None) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and total > max_norm:
        for g in grads.values():
            g *= max_norm / total
    return total


class LearningRateSchedule:
    """Step-decay (``decay ** (step // every)``) with an optional hard reset epoch."""

    def __init__(self, base_lr: float, decay: float = 1.0, decay_every: int = 0,
                 reset_epoch: int | None = None, reset_lr: float | None = None):
        self.base_lr = base_lr
        self.decay = decay
        self.decay_every = decay_every
        self.reset_epoch = reset_epoch
        self.reset_lr = reset_lr

    def __call__(self, step: int, epoch: int) -> float:
        if self.reset_epoch is not None and epoch >= self.reset_epoch:
            return self.reset_lr
        lr = self.base_lr
        if self.decay_every:
            lr *= self.decay ** (step // self.decay_every)
        return lr
