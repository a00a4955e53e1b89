"""Bias-corrected Adam over named parameter sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Var


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus the step counter."""

    learning_rate: float = 2e-3
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Var],
              grads: dict[str, np.ndarray]) -> AdamState:
    """One in-place Adam update; parameters with zero gradient stay put."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise ShapeError(f"gradient shape {g.shape} != param {name} shape {p.value.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.value)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        update = (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.value = p.value - (state.learning_rate * update).astype(p.value.dtype)
    return state
