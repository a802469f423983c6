"""AdamW with decoupled weight decay and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from perfusion.errors import ContractError
from perfusion.numerics.tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moments: list[np.ndarray] = field(default_factory=list)
    second_moments: list[np.ndarray] = field(default_factory=list)

    def warmup_factor(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, step / self.warmup_steps)


def adamw_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """One AdamW update in place.

    The learning rate at step ``t`` (1-based) is ``lr * min(1, t / warmup)``;
    weight decay multiplies the weights directly and never enters the moments.
    """
    if not state.first_moments:
        state.first_moments = [np.zeros_like(p.data) for p in params]
        state.second_moments = [np.zeros_like(p.data) for p in params]
    if len(state.first_moments) != len(params):
        raise ContractError("optimizer state was built for a different parameter list")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name or p.shape} has no gradient")

    state.step += 1
    t = state.step
    lr = state.learning_rate * state.warmup_factor(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moments, state.second_moments):
        g = p.grad
        if m.shape != p.shape:
            raise ContractError("moment shape does not match parameter shape")
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Binds a fixed parameter list to an :class:`OptimizerState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, weight_decay: float = 1e-2,
                 warmup_steps: int = 500, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(
            learning_rate=lr, weight_decay=weight_decay, warmup_steps=warmup_steps,
            beta1=betas[0], beta2=betas[1], eps=eps,
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, self.state)
