"""Bias-corrected adaptive-moment optimizer with a skip policy for
non-finite gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from .tensor import Parameter


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: list[Parameter], state: OptimizerState) -> bool:
    """One update over ``params`` using their accumulated .grad.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite; the caller decides how to report the skipped step.
    """
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise InvalidInputError(f"gradient shape mismatch for {p.name!r}")
        if not np.all(np.isfinite(g)):
            return False
        grads.append(g)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g in zip(params, grads):
        if not p.trainable:
            continue
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.data))
        m += (1 - b1) * (g - m)
        v += (1 - b2) * (g * g - v)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data = p.data - (state.lr * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.data.dtype)
    return True
