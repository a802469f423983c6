"""Minimal parameter containers.

A :class:`Module` owns named parameters and child modules; ``named_parameters``
yields slash-separated names that double as checkpoint keys.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from perfusion.errors import DimensionError
from perfusion.numerics.tensor import Tensor, affine, gelu, parameter


class Module:
    """Base container. Every public Tensor attribute is a parameter."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + "/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}/{i}/")
                    elif isinstance(item, Tensor):
                        yield f"{name}/{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map ``x @ weight + bias`` applied over the last axis."""

    def __init__(self, rng: np.random.Generator | None, n_in: int, n_out: int, zero: bool = False):
        if zero:
            self.weight = parameter(np.zeros((n_in, n_out)))
            self.bias = parameter(np.zeros(n_out))
        else:
            self.weight = parameter(uniform_init(rng, n_in, (n_in, n_out)))
            self.bias = parameter(uniform_init(rng, n_in, (n_out,)))
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise DimensionError(f"Linear expects last axis {self.n_in}, got {x.shape}")
        if x.ndim == 2:
            return affine(x, self.weight, self.bias)
        lead = x.shape[:-1]
        return affine(x.reshape(-1, self.n_in), self.weight, self.bias).reshape(*lead, self.n_out)


class MLP(Module):
    """Two affine layers with GeLU between."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_hidden: int, n_out: int, zero_last: bool = False):
        self.layer0 = Linear(rng, n_in, n_hidden)
        self.layer1 = Linear(rng, n_hidden, n_out, zero=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        return self.layer1(gelu(self.layer0(x)))
