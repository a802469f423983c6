"""User representation: categorical embeddings, residual feature crossing, adaptive nets.

``CrossNetwork`` turns a user's categorical profile into a dense preference
vector ``u``.  Each crossing layer computes ``u0 * <u_l, w_l> + b_l + u_l``,
the outer product ``u0 u_l^T w_l`` collapsed to a scalar-scaled ``u0``.
``AdaptiveNetwork`` maps ``u`` to an injection vector and starts out as the
constant zero function because its last layer is zero-initialized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from perfusion.errors import DimensionError
from perfusion.numerics import MLP, Module, Tensor, concat, parameter, take, tsum
from perfusion.numerics.tensor import add, mul


@dataclass(frozen=True)
class UserProfile:
    feature_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "feature_ids", tuple(int(i) for i in self.feature_ids))


def validate_profile(profile: UserProfile, cardinalities: Sequence[int]) -> None:
    if len(profile.feature_ids) != len(cardinalities):
        raise DimensionError(f"profile has {len(profile.feature_ids)} fields, expected {len(cardinalities)}")
    for field, (idx, card) in enumerate(zip(profile.feature_ids, cardinalities)):
        if not 0 <= idx < card:
            raise IndexError(f"feature field {field}: index {idx} outside [0, {card})")


class CrossNetwork(Module):
    """Per-field embedding tables followed by ``n_layers`` residual crossing layers."""

    def __init__(self, rng: np.random.Generator, cardinalities: Sequence[int], embed_dim: int = 8,
                 n_layers: int = 2):
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.embed_dim = embed_dim
        width = len(self.cardinalities) * embed_dim
        self.embed = [parameter(rng.normal(0.0, 1.0, size=(card, embed_dim))) for card in self.cardinalities]
        bound = 1.0 / np.sqrt(width)
        self.cross = [_CrossLayer(rng.uniform(-bound, bound, size=width), np.zeros(width)) for _ in range(n_layers)]

    @property
    def out_dim(self) -> int:
        return len(self.cardinalities) * self.embed_dim

    def embed_batch(self, feature_ids: np.ndarray) -> Tensor:
        """Concatenated field embeddings ``u0`` for a (batch, F) index array."""
        ids = np.atleast_2d(np.asarray(feature_ids, dtype=np.int64))
        if ids.shape[1] != len(self.cardinalities):
            raise DimensionError(f"expected {len(self.cardinalities)} feature fields, got {ids.shape[1]}")
        for f, card in enumerate(self.cardinalities):
            col = ids[:, f]
            if col.min() < 0 or col.max() >= card:
                raise IndexError(f"feature field {f}: index outside [0, {card})")
        return concat([take(table, ids[:, f]) for f, table in enumerate(self.embed)], axis=-1)

    def __call__(self, feature_ids: np.ndarray) -> Tensor:
        return cross_forward(self.embed_batch(feature_ids), self)


class _CrossLayer(Module):
    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w = parameter(w)
        self.b = parameter(b)


def embed(profile: UserProfile, net: CrossNetwork) -> Tensor:
    validate_profile(profile, net.cardinalities)
    return net.embed_batch(np.asarray([profile.feature_ids])).reshape(net.out_dim)


def cross_forward(u0: Tensor, net: CrossNetwork) -> Tensor:
    """Apply every crossing layer; ``u0`` may be a vector or a (batch, F*d) matrix."""
    if u0.shape[-1] != net.out_dim:
        raise DimensionError(f"cross network expects length {net.out_dim}, got {u0.shape}")
    u = u0
    for layer in net.cross:
        proj = tsum(mul(u, layer.w), axis=-1, keepdims=True)
        u = add(add(mul(u0, proj), layer.b), u)
    return u


class AdaptiveNetwork(MLP):
    """Two-layer GeLU perceptron whose final layer starts at exactly zero."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        super().__init__(rng, n_in, max(n_in, n_out), n_out, zero_last=True)


def adapt(u: Tensor, ada: AdaptiveNetwork) -> Tensor:
    return ada(u)
