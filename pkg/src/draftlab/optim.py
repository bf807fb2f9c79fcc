"""Adam with bias correction, restricted to trainable parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .params import ParamStore


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, lr: float) -> None:
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.items():
        if not p.trainable:
            continue
        x = p.tensor.data
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(x)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(x)
            v = np.zeros_like(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.tensor.data = (x - step).astype(x.dtype)
