"""AdamW with decoupled weight decay, and the warmup-then-linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params, **hyper):
        return cls(m=[np.zeros_like(p.data) for p in params], v=[np.zeros_like(p.data) for p in params], **hyper)


def adamw_step(params, grads, state: AdamWState, lr: float) -> None:
    """One in-place AdamW update. A ``None`` grad counts as zero."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError(f"state holds {len(state.m)} buffers for {len(params)} params / {len(grads)} grads")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if state.m[i].shape != p.data.shape or g.shape != p.data.shape:
            raise ValueError(f"param {i}: shape {p.data.shape}, grad {g.shape}, moment {state.m[i].shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        data = p.data * (1.0 - lr * state.weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.state = AdamWState.for_params(self.params, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr):
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)


def warmup_linear_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp to ``base_lr`` over ``warmup_steps``, then linear decay to 0."""
    if not 0 < warmup_steps < total_steps:
        raise ConfigError(f"need 0 < warmup_steps < total_steps, got {warmup_steps} and {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)
