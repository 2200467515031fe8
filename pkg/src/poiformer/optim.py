"""Adam with bias correction; weight decay is an L2 term on the gradient unless decoupled."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import Tensor


@dataclass
class OptimizerState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimizerState,
              lr: float = 1e-3, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
              decoupled: bool = False) -> None:
    """Update ``params`` in place; entries whose gradient is None are skipped."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and decoupled:
            update = update + weight_decay * p.data
        p.data -= lr * update


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, decoupled: bool = False):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.decoupled = decoupled
        self.state = OptimizerState()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                  self.weight_decay, self.betas, self.eps, self.decoupled)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
