"""Adam with bias correction, keyed by parameter name."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimizerStateError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for p in params:
            if p.name in state.m:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state


def adam_step(params, state):
    """Apply one Adam update in place. Gradients are read, never modified."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        try:
            m = state.m[p.name]
            v = state.v[p.name]
        except KeyError:
            raise OptimizerStateError(f"no Adam moments for parameter {p.name!r}") from None
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    """Thin stateful wrapper over :func:`adam_step`."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.init(self.params, lr, beta1, beta2, eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.state)
