"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Array, TensorNode


@dataclass
class AdamState:
    """First/second moment buffers, one pair per parameter, plus hyperparams."""

    m: list[Array]
    v: list[Array]
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[TensorNode], lr: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros_like(p.values) for p in params],
                   v=[np.zeros_like(p.values) for p in params],
                   step_count=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Sequence[TensorNode], state: AdamState) -> None:
    """One Adam update in place; gradients are left untouched for the caller."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} has no gradient")
        if state.m[i].shape != p.values.shape:
            raise ValueError(f"optimizer state shape mismatch on parameter {i}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Sequence[TensorNode]) -> None:
    for p in params:
        p.reset_grad()
