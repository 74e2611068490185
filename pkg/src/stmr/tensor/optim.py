"""Adam with bias correction and a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: OptimizerState, weight_decay: float = 0.0, clip_norm: float | None = None) -> None:
    """One Adam update of ``params`` in place; moments are keyed by parameter name."""
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ValueError(f"parameters without gradient: {missing[:5]}")
    grads = [p.grad for p in params]
    if clip_norm is not None:
        total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        if total > clip_norm:
            grads = [g * (clip_norm / total) for g in grads]
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError("Adam needs uniquely named parameters")
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps)
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm

    def step(self) -> None:
        adam_step(self.params, self.state, self.weight_decay, self.clip_norm)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_lr(base_lr: float, epoch: int, decay_epoch: int | None, factor: float = 10.0) -> float:
    """Learning rate for ``epoch`` (0-based): divided by ``factor`` from ``decay_epoch`` on."""
    if decay_epoch is not None and epoch >= decay_epoch:
        return base_lr / factor
    return base_lr
