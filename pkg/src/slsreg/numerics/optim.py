from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam with bias correction, updating ``Tensor.value`` in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr, beta1, beta2, eps, 0,
                               [np.zeros_like(p.value) for p in self.params],
                               [np.zeros_like(p.value) for p in self.params])

    def step(self, grads: Sequence[np.ndarray] | dict | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        elif isinstance(grads, dict):
            grads = [grads.get(p, np.zeros_like(p.value)) for p in self.params]
        adam_step(self.state, self.params, grads)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.value.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value = p.value - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
