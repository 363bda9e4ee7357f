from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """Raised before any parameter is touched when a gradient holds NaN or inf."""

    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"non-finite gradient in: {', '.join(self.names)}")


def lr_at(step: int, warmup_steps: int, D: int, c: float = 1.0, lr_cap: float = 1e-4,
          schedule: str = "damped_warmup") -> float:
    """Warmup-then-inverse-sqrt learning rate, clipped at ``lr_cap``.

    ``schedule="damped_warmup"`` evaluates the ramp as ``step * warmup**-1.5 / sqrt(warmup)``;
    ``schedule="standard"`` uses the usual ``step * warmup**-1.5`` ramp, whose
    branches meet at ``step == warmup``.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    decay = 1.0 / math.sqrt(step)
    ramp = step * warmup_steps ** -1.5
    if schedule == "damped_warmup":
        ramp /= math.sqrt(warmup_steps)
    elif schedule != "standard":
        raise ValueError(f"unknown schedule {schedule!r}")
    lr = min(decay, ramp) * c / math.sqrt(D)
    return min(lr_cap, lr)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.99, epsilon: float = 1e-9) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad)
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)).astype(p.dtype, copy=False)
    return params, state
