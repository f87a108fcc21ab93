"""Adam with bias correction over a named parameter mapping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import adam_update


@dataclass
class AdamState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(arrays, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(lr, beta1, beta2, eps, 0,
                     {k: np.zeros_like(a) for k, a in arrays.items()},
                     {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(arrays, grads, state):
    """Update ``arrays`` in place from ``grads`` and advance ``state``.

    Names missing from ``grads`` are left untouched (their moments too).
    """
    state.t += 1
    for name, g in grads.items():
        p = arrays[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        adam_update(p, g, state.m[name], state.v[name],
                    state.lr, state.beta1, state.beta2, state.eps, state.t)
    return arrays, state
