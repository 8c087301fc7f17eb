"""Momentum SGD with weight decay and a warmup + milestone learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal

import numpy as np


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.1
    warmup_epochs: int = 1
    milestones: tuple = (60, 120, 160)
    gamma: float = 0.2
    steps_per_epoch: int = 391

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if self.base_lr <= 0 or self.gamma <= 0 or self.steps_per_epoch < 1:
            raise ValueError("base_lr, gamma and steps_per_epoch must be positive")
        object.__setattr__(self, "milestones", ms)


def lr_at(global_step, sched):
    """Learning rate for a 0-based optimizer step.

    Warmup ramps linearly per step over the first ``warmup_epochs`` epochs and
    ends exactly at ``base_lr``; afterwards the rate is multiplied by ``gamma``
    once for every milestone at or below the current 0-based epoch.
    """
    if global_step < 0:
        raise ValueError("global_step must be >= 0")
    warm = sched.warmup_epochs * sched.steps_per_epoch
    if global_step < warm:
        return sched.base_lr * ((global_step + 1) / warm)
    epoch = global_step // sched.steps_per_epoch
    passed = sum(1 for m in sched.milestones if m <= epoch)
    # decimal product so 0.1 * 0.2**2 comes out as the float nearest 0.004
    return float(Decimal(repr(sched.base_lr)) * Decimal(repr(sched.gamma)) ** passed)


class SGD:
    """In-place momentum SGD over a fixed list of parameter tensors.

    g' = g + weight_decay * w;  buf = momentum * buf + g';  w -= lr * buf
    """

    def __init__(self, params, momentum=0.9, weight_decay=2e-4):
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        for p, buf in zip(self.params, self.buffers):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != buf.shape:
                raise RuntimeError(f"gradient shape {g.shape} != buffer shape {buf.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= lr * buf

    def zero_momentum(self, params):
        ids = {id(p) for p in params}
        for p, buf in zip(self.params, self.buffers):
            if id(p) in ids:
                buf.fill(0.0)


def sgd_step(params, grads, buffers, lr, momentum=0.9, weight_decay=2e-4):
    """Functional form of one SGD update on raw arrays (mutates ``params`` and ``buffers``)."""
    for w, g, buf in zip(params, grads, buffers):
        if g.shape != buf.shape or w.shape != buf.shape:
            raise RuntimeError(f"shape mismatch: param {w.shape}, grad {g.shape}, buffer {buf.shape}")
        g = g + weight_decay * w
        buf *= momentum
        buf += g
        w -= lr * buf
