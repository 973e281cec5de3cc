"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """Update ``params`` (Tensors or arrays) in place from ``grads``; returns ``(params, state)``."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    arrays = [getattr(p, "data", p) for p in params]
    for a, g in zip(arrays, grads):
        if a.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter shape {a.shape}")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    elif len(state.m) != len(arrays) or any(m.shape != a.shape for m, a in zip(state.m, arrays)):
        raise ValueError("Adam state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        g = np.asarray(g, dtype=a.dtype)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        a -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(a.dtype)
    return params, state


class Adam:
    """Stateful wrapper: ``opt.step(grads)`` updates the tensors given at construction."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads):
        adam_step(self.params, grads, self.state)
