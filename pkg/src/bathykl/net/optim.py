from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AmsGradState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def amsgrad_step(params: dict, grads: dict, state: AmsGradState, lr: float,
                 weight_decay: float = 0.0, decay_names=None) -> None:
    """In-place AMSGrad update with bias correction.

    L2 decay ``weight_decay * theta`` is added to the gradient of the names in
    ``decay_names`` (all parameters when None).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    decay = set(params) if decay_names is None else set(decay_names)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: {p.shape} vs {g.shape}")
        if weight_decay and k in decay:
            g = g + weight_decay * p
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
            state.v_max[k] = np.zeros_like(p)
        m, v, vm = state.m[k], state.v[k], state.v_max[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        np.maximum(vm, v, out=vm)
        p -= lr * (m / c1) / (np.sqrt(vm / c2) + state.eps)
