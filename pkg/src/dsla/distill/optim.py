"""AdamW with linear warmup followed by cosine decay to a floor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    warmup_fraction: float = 0.05
    peak_lr: float = 1e-4
    floor_lr: float = 5e-5

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    def lr(self, step: int) -> float:
        ws = self.warmup_steps
        if step < ws:
            return self.peak_lr * step / ws
        span = max(self.total_steps - ws, 1)
        progress = min((step - ws) / span, 1.0)
        return self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_no_decay(name: str) -> bool:
    """Biases and the blend logit are excluded from weight decay."""
    return name == "gamma_logit" or name.rsplit(".", 1)[-1].startswith("b_")


@dataclass
class OptimizerState:
    schedule: Schedule
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def optimizer_step(params: dict, grads: dict, state: OptimizerState, no_decay=default_no_decay):
    """One AdamW update; returns ``(new_params, new_state, lr)``.

    The learning rate is read from the schedule at the current step counter
    (so step 0 of a warmed-up run moves nothing), moments use bias correction
    at ``t = step + 1``, and weight decay shrinks weights directly rather than
    entering the gradient.
    """
    if set(params) != set(grads):
        raise ShapeError(f"parameter and gradient keys differ: {sorted(set(params) ^ set(grads))}")
    lr = state.schedule.lr(state.step)
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - state.beta2) * g * g
        wd = 0.0 if no_decay(name) else state.weight_decay
        new_p[name] = p - lr * wd * p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, replace(state, step=t, m=new_m, v=new_v), lr
