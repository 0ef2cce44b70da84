"""Adam optimizer over tape Params."""

from dataclasses import dataclass, field

import numpy as np

from .tape import Param


@dataclass
class AdamState:
    """Per-parameter Adam moments and hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    @classmethod
    def for_param(cls, p: Param, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m=np.zeros_like(p.value), v=np.zeros_like(p.value),
                   **kw)


def adam_step(params: list[Param], states: list[AdamState]) -> None:
    """One bias-corrected Adam update, in place, from current grads."""
    for p, s in zip(params, states):
        s.step += 1
        g = p.grad
        s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
        s.v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
        m_hat = s.m / (1.0 - s.beta1 ** s.step)
        v_hat = s.v / (1.0 - s.beta2 ** s.step)
        p.value -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


def zero_grads(params: list[Param]) -> None:
    for p in params:
        p.zero_grad()
