"""Toy DDPM over item vectors with a personalized ControlNet-style branch.

The backbone is an MLP U-Net: three narrowing encoder blocks, a middle block
and three decoder blocks that each concatenate the matching encoder output.
Timestep and condition embeddings are added inside every block.

The personalized branch holds trainable copies of the encoder and middle
blocks (and of the embeddings they consume).  Its input is
``z_t + zero_fusion(project(u))``.  Each copy's output goes through a
zero-initialized affine bridge and is added to the backbone's matching
decoder input: encoder copy k into skip k, the middle copy into the middle
output.  With fresh bridges the branch contributes exact zeros.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from perfusion.errors import DegenerateInputError, DimensionError
from perfusion.numerics import Linear, Module, Tensor, concat, gelu, no_grad, square
from perfusion.numerics.tensor import add, sub
from perfusion.personalization import CrossNetwork


@dataclass(frozen=True)
class NoiseSchedule:
    """Index 0 is the clean sample; timesteps run 1..T."""

    betas: np.ndarray        # length T + 1, betas[0] = 0
    alpha_bars: np.ndarray   # length T + 1, alpha_bars[0] = 1

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
        if T < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("need T >= 1 and 0 < beta_start <= beta_end < 1")
        betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        return cls(betas=betas, alpha_bars=np.cumprod(1.0 - betas))

    @classmethod
    def from_alpha_bars(cls, alpha_bars: Sequence[float]) -> NoiseSchedule:
        ab = np.concatenate([[1.0], np.asarray(alpha_bars, dtype=np.float64)])
        prev = ab[:-1]
        betas = np.concatenate([[0.0], 1.0 - np.divide(ab[1:], prev, out=np.zeros_like(prev), where=prev > 0)])
        return cls(betas=betas, alpha_bars=ab)

    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas


def _check_t(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise IndexError(f"timestep outside [1, {sched.T}]")
    return t


def forward_diffuse(z0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form q(z_t | z0): sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, t per row if batched."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionError(f"z0 {z0.shape} and eps {eps.shape} differ")
    t = _check_t(t, sched)
    ab = sched.alpha_bars[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (batch, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class UNetGeometry:
    item_dim: int = 32
    cond_dim: int = 8
    widths: tuple[int, int, int] = (64, 48, 32)
    emb_dim: int = 64
    time_features: int = 32


class _Block(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, emb_dim: int):
        self.lin = Linear(rng, n_in, n_out)
        self.emb = Linear(rng, emb_dim, n_out)

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        return gelu(add(self.lin(x), self.emb(emb)))


class _Embedding(Module):
    def __init__(self, rng: np.random.Generator, geo: UNetGeometry):
        self.time = Linear(rng, geo.time_features, geo.emb_dim)
        self.cond = Linear(rng, geo.cond_dim, geo.emb_dim)
        self._tf = geo.time_features

    def __call__(self, t: np.ndarray, c: np.ndarray) -> Tensor:
        return add(self.time(Tensor(timestep_features(t, self._tf))), self.cond(Tensor(c)))


class ToyUNet(Module):
    def __init__(self, rng: np.random.Generator, geo: UNetGeometry = UNetGeometry()):
        self.geo = geo
        w1, w2, w3 = geo.widths
        e = geo.emb_dim
        self.embed = _Embedding(rng, geo)
        self.enc = [_Block(rng, geo.item_dim, w1, e), _Block(rng, w1, w2, e), _Block(rng, w2, w3, e)]
        self.mid = _Block(rng, w3, w3, e)
        # decoder k consumes (previous output, encoder k output); listed deepest first
        self.dec = [_Block(rng, w3 + w3, w2, e), _Block(rng, w2 + w2, w1, e), _Block(rng, w1 + w1, w1, e)]
        self.head = Linear(rng, w1, geo.item_dim)

    def encode(self, z: Tensor, emb: Tensor) -> tuple[list[Tensor], Tensor]:
        skips = []
        h = z
        for block in self.enc:
            h = block(h, emb)
            skips.append(h)
        return skips, self.mid(h, emb)

    def decode(self, skips: list[Tensor], m: Tensor, emb: Tensor) -> Tensor:
        h = m
        for block, skip in zip(self.dec, reversed(skips)):
            h = block(concat([h, skip], axis=-1), emb)
        return self.head(h)


class PersonalizedBranch(Module):
    def __init__(self, rng: np.random.Generator, backbone: ToyUNet, cardinalities: Sequence[int],
                 embed_dim: int = 8, cross_layers: int = 2):
        geo = backbone.geo
        self.cross = CrossNetwork(rng, cardinalities, embed_dim, cross_layers)
        self.u_proj = Linear(rng, self.cross.out_dim, geo.item_dim)
        self.zero_fusion = Linear(None, geo.item_dim, geo.item_dim, zero=True)
        self.embed = copy.deepcopy(backbone.embed)
        self.enc = copy.deepcopy(backbone.enc)
        self.mid = copy.deepcopy(backbone.mid)
        self.bridges = [Linear(None, w, w, zero=True) for w in geo.widths]
        self.mid_bridge = Linear(None, geo.widths[-1], geo.widths[-1], zero=True)
        self.set_trainable(True)

    def zero_layers(self) -> list[Linear]:
        return [self.zero_fusion, *self.bridges, self.mid_bridge]

    def controls(self, z: Tensor, t: np.ndarray, c: np.ndarray, features: np.ndarray) -> tuple[list[Tensor], Tensor]:
        u = self.cross(features)
        z_prime = add(z, self.zero_fusion(self.u_proj(u)))
        emb = self.embed(t, c)
        h = z_prime
        outs = []
        for block, bridge in zip(self.enc, self.bridges):
            h = block(h, emb)
            outs.append(bridge(h))
        return outs, self.mid_bridge(self.mid(h, emb))


class DiffusionModel(Module):
    """Backbone U-Net plus an optional personalized branch."""

    def __init__(self, backbone: ToyUNet, branch: PersonalizedBranch | None = None, data_scale: float = 1.0):
        self.backbone = backbone
        self.branch = branch
        self._data_scale = float(data_scale)

    @property
    def data_scale(self) -> float:
        return self._data_scale

    @classmethod
    def create(cls, rng: np.random.Generator, geo: UNetGeometry = UNetGeometry(),
               cardinalities: Sequence[int] | None = None, data_scale: float = 1.0) -> DiffusionModel:
        backbone = ToyUNet(rng, geo)
        branch = PersonalizedBranch(rng, backbone, cardinalities) if cardinalities is not None else None
        return cls(backbone, branch, data_scale)

    def add_branch(self, rng: np.random.Generator, cardinalities: Sequence[int]) -> None:
        self.branch = PersonalizedBranch(rng, self.backbone, cardinalities)

    def __call__(self, z_t, t, c, features=None) -> Tensor:
        return predict_noise(z_t, t, c, features, self)

    def frozen_copy(self) -> DiffusionModel:
        ref = copy.deepcopy(self)
        ref.set_trainable(False)
        return ref


def predict_noise(z_t, t, c, features, model: DiffusionModel) -> Tensor:
    """Noise prediction for a batch: z_t (B, D), t (B,), c (B, cond), features (B, F) or None."""
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    if z.ndim != 2 or z.shape[1] != model.backbone.geo.item_dim:
        raise DimensionError(f"z_t must be (batch, {model.backbone.geo.item_dim}), got {z.shape}")
    b = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = np.broadcast_to(c, (b, c.shape[0]))
    if c.shape != (b, model.backbone.geo.cond_dim):
        raise DimensionError(f"condition must be (batch, {model.backbone.geo.cond_dim}), got {c.shape}")
    net = model.backbone
    emb = net.embed(t, c)
    skips, m = net.encode(z, emb)
    if features is not None and model.branch is not None:
        feats = np.asarray(features, dtype=np.int64)
        if feats.ndim == 1:
            feats = np.broadcast_to(feats, (b, feats.shape[0]))
        ctrl, ctrl_mid = model.branch.controls(z, t, c, feats)
        skips = [add(s, k) for s, k in zip(skips, ctrl)]
        m = add(m, ctrl_mid)
    return net.decode(skips, m, emb)


def sft_loss(z0: np.ndarray, c: np.ndarray, features: np.ndarray | None, model: DiffusionModel,
             sched: NoiseSchedule, rng: np.random.Generator | None = None,
             draws: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    """Mean squared noise-prediction error; t uniform in [1, T] and eps ~ N(0, I) per row.

    ``z0`` is in data units; the model's data scale is applied here.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 2 or z0.shape[0] == 0:
        raise DegenerateInputError("sft_loss needs a non-empty (batch, item_dim) array")
    if draws is None:
        if rng is None:
            raise ValueError("either rng or draws is required")
        t = rng.integers(1, sched.T + 1, size=z0.shape[0])
        eps = rng.normal(size=z0.shape)
    else:
        t, eps = draws
    z_t = forward_diffuse(z0 / model.data_scale, t, eps, sched)
    pred = predict_noise(z_t, t, c, features, model)
    return square(sub(Tensor(eps), pred)).mean()


def sample(model: DiffusionModel, c: np.ndarray, features: np.ndarray | None, sched: NoiseSchedule,
           seeds: Sequence[int] | int) -> np.ndarray:
    """DDPM ancestral sampling, one row per seed, returned in data units.

    Row i draws all of its noise from ``default_rng(seeds[i])`` so results do
    not depend on how rows are batched.
    """
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    seeds = [seeds] if np.isscalar(seeds) else list(seeds)
    n = len(seeds)
    if c.shape[0] == 1 and n > 1:
        c = np.repeat(c, n, axis=0)
    if features is not None:
        features = np.atleast_2d(np.asarray(features, dtype=np.int64))
        if features.shape[0] == 1 and n > 1:
            features = np.repeat(features, n, axis=0)
    d = model.backbone.geo.item_dim
    gens = [np.random.default_rng(int(s)) for s in seeds]
    z = np.stack([g.normal(size=d) for g in gens])
    alphas = sched.alphas()
    ab = sched.alpha_bars
    with no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = predict_noise(z, np.full(n, t), c, features, model).data
            mean = (z - sched.betas[t] / np.sqrt(1.0 - ab[t]) * eps_hat) / np.sqrt(alphas[t])
            if t > 1:
                var = sched.betas[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t])
                noise = np.stack([g.normal(size=d) for g in gens])
                z = mean + np.sqrt(var) * noise
            else:
                z = mean
    return z * model.data_scale


def branch_is_fresh(branch: PersonalizedBranch | None) -> bool:
    if branch is None:
        return True
    return all(not np.any(layer.weight.data) and not np.any(layer.bias.data) for layer in branch.zero_layers())


@dataclass(frozen=True)
class SftConfig:
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    warmup_steps: int = 0
    seed: int = 0


def train_sft(model: DiffusionModel, z0: np.ndarray, conditions: np.ndarray, features: np.ndarray | None,
              sched: NoiseSchedule, cfg: SftConfig) -> list[float]:
    """Mini-batch AdamW on the denoising loss over whatever parameters are trainable.

    Passing ``features`` routes every batch through the personalized branch.
    """
    from perfusion.numerics import AdamW

    z0 = np.asarray(z0, dtype=np.float64)
    if len(z0) == 0:
        raise DegenerateInputError("empty training set")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
    rng = np.random.default_rng(cfg.seed)
    n = len(z0)
    order, cursor = rng.permutation(n), 0
    curve = []
    for _ in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        opt.zero_grad()
        feats = None if features is None else features[idx]
        loss = sft_loss(z0[idx], conditions[idx], feats, model, sched, rng)
        loss.backward()
        opt.step()
        curve.append(loss.item())
    return curve
