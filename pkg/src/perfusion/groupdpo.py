"""Group-level preference optimization for the toy denoiser.

The preference probability of a positive set P over a negative set N under
Plackett-Luce (each positive assumed to rank ahead of all negatives,
independently per positive) collapses to a per-positive softmax.  Replacing
rewards with the denoising-error gap ``s`` of the trainable model against a
frozen reference gives the training objective

    L = - sum_p log sigmoid( - logsumexp_n ( beta * s_p - beta * s_n ) )

With one positive and one negative it is the pairwise Diffusion-DPO loss.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from perfusion.diffusion import DiffusionModel, NoiseSchedule, forward_diffuse, predict_noise
from perfusion.errors import ContractError, DegenerateInputError, DimensionError
from perfusion.numerics import AdamW, Tensor, log_sigmoid, logsumexp, no_grad, reshape, square, sub, tsum
from perfusion.numerics.tensor import getitem, mul, neg

MAX_ORACLE_NEGATIVES = 6


def _as_rewards(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DegenerateInputError(f"{what} is empty")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{what} contains non-finite values")
    return arr


def pl_probability_closed(rewards_p, rewards_n) -> float:
    """sum_p 1 / (1 + sum_n exp(r_n - r_p)), computed as sigmoid(-logsumexp)."""
    rp = _as_rewards(rewards_p, "positive rewards")
    rn = _as_rewards(rewards_n, "negative rewards")
    d = rn[None, :] - rp[:, None]
    top = d.max(axis=1, keepdims=True)
    lse = (top + np.log(np.exp(d - top).sum(axis=1, keepdims=True))).ravel()
    # log sigmoid(-x) = -logaddexp(0, x)
    return float(np.exp(-np.logaddexp(0.0, lse)).sum())


def pl_probability_oracle(rewards_p, rewards_n) -> float:
    """Brute force: sum Plackett-Luce ranking probabilities over every order of N behind p."""
    rp = [float(r) for r in _as_rewards(rewards_p, "positive rewards")]
    rn = [float(r) for r in _as_rewards(rewards_n, "negative rewards")]
    if len(rn) > MAX_ORACLE_NEGATIVES:
        raise ContractError(f"oracle enumerates |N|! orders; |N| <= {MAX_ORACLE_NEGATIVES} required")
    total = 0.0
    for r_pos in rp:
        shift = max([r_pos, *rn])
        theta_p = math.exp(r_pos - shift)
        theta_n = [math.exp(r - shift) for r in rn]
        prob = 0.0
        for order in itertools.permutations(range(len(rn))):
            ranking = [theta_p] + [theta_n[i] for i in order]
            pr = 1.0
            for i in range(len(ranking)):
                pr *= ranking[i] / math.fsum(ranking[i:])
            prob += pr
        total += prob
    return total


def group_loss_from_scores(s_pos, s_neg, beta: float) -> Tensor:
    """Loss for score tensors of shape (..., |P|) and (..., |N|); summed over P, averaged over leading axes."""
    s_pos = s_pos if isinstance(s_pos, Tensor) else Tensor(s_pos)
    s_neg = s_neg if isinstance(s_neg, Tensor) else Tensor(s_neg)
    if s_pos.size == 0 or s_neg.size == 0:
        raise DegenerateInputError("both positive and negative sets must be non-empty")
    if beta <= 0:
        raise ValueError("beta must be positive")
    lead = s_pos.shape[:-1]
    if s_neg.shape[:-1] != lead:
        raise DimensionError(f"positive {s_pos.shape} and negative {s_neg.shape} batch shapes differ")
    k, m = s_pos.shape[-1], s_neg.shape[-1]
    sp = reshape(mul(s_pos, beta), lead + (k, 1))
    sn = reshape(mul(s_neg, beta), lead + (1, m))
    lse = logsumexp(sub(sp, sn), axis=-1)                 # (..., K)
    per_group = neg(tsum(log_sigmoid(neg(lse)), axis=-1))  # (...,)
    return per_group.mean() if lead else per_group


def pairwise_loss_from_scores(s_p, s_n, beta: float) -> Tensor:
    """-log sigmoid(beta * s_n - beta * s_p)."""
    s_p = s_p if isinstance(s_p, Tensor) else Tensor(s_p)
    s_n = s_n if isinstance(s_n, Tensor) else Tensor(s_n)
    if beta <= 0:
        raise ValueError("beta must be positive")
    out = neg(log_sigmoid(sub(mul(s_n, beta), mul(s_p, beta))))
    return out.mean() if out.ndim else out


@dataclass(frozen=True)
class PreferenceGroup:
    positives: np.ndarray          # (|P|, D)
    negatives: np.ndarray          # (|N|, D)
    condition: np.ndarray          # (cond_dim,)
    features: np.ndarray | None    # (F,) or None

    def __post_init__(self):
        if len(self.positives) == 0 or len(self.negatives) == 0:
            raise DegenerateInputError("a preference group needs at least one positive and one negative")


@dataclass(frozen=True)
class Draws:
    """One timestep per group and one noise vector per candidate, positives first."""

    t: np.ndarray      # (B,)
    eps: np.ndarray    # (B, N, D)

    @classmethod
    def sample(cls, rng: np.random.Generator, batch: int, n: int, d: int, T: int,
               noise: str = "independent") -> Draws:
        t = rng.integers(1, T + 1, size=batch)
        if noise == "independent":
            eps = rng.normal(size=(batch, n, d))
        elif noise == "shared":
            eps = np.repeat(rng.normal(size=(batch, 1, d)), n, axis=1)
        else:
            raise ValueError(f"unknown noise rule {noise!r}")
        return cls(t=t, eps=eps)


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 2000.0
    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    warmup_steps: int = 0
    noise: str = "independent"    # or "shared": one noise vector per group
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.noise not in ("independent", "shared"):
            raise ValueError(f"unknown noise rule {self.noise!r}")


def per_sample_score(item, c, t, eps, features, model: DiffusionModel, ref: DiffusionModel,
                     sched: NoiseSchedule) -> Tensor:
    """||eps - eps_theta(z_t)||^2 - ||eps - eps_ref(z_t)||^2 for a batch of rows; ``item`` in data units."""
    item = np.atleast_2d(np.asarray(item, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if item.shape != eps.shape:
        raise DimensionError(f"item {item.shape} and noise {eps.shape} differ")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (item.shape[0],))
    z_t = forward_diffuse(item / model.data_scale, t, eps, sched)
    e = Tensor(eps)
    err = tsum(square(sub(e, predict_noise(z_t, t, c, features, model))), axis=-1)
    with no_grad():
        ref_err = np.sum((eps - predict_noise(z_t, t, c, features, ref).data) ** 2, axis=-1)
    return sub(err, Tensor(ref_err))


def batch_scores(items: np.ndarray, conditions: np.ndarray, features: np.ndarray | None, draws: Draws,
                 model: DiffusionModel, ref: DiffusionModel, sched: NoiseSchedule) -> Tensor:
    """Scores for (B, N, D) candidate blocks with the per-group t shared across candidates -> (B, N)."""
    b, n, d = items.shape
    rows = items.reshape(b * n, d)
    t = np.repeat(draws.t, n)
    c = np.repeat(np.asarray(conditions, dtype=np.float64), n, axis=0)
    f = None if features is None else np.repeat(np.asarray(features, dtype=np.int64), n, axis=0)
    s = per_sample_score(rows, c, t, draws.eps.reshape(b * n, d), f, model, ref, sched)
    return reshape(s, (b, n))


def _split(s: Tensor, k: int) -> tuple[Tensor, Tensor]:
    return getitem(s, (slice(None), slice(0, k))), getitem(s, (slice(None), slice(k, None)))


def group_dpo_loss(group: PreferenceGroup, cfg: DpoConfig, model: DiffusionModel, ref: DiffusionModel,
                   sched: NoiseSchedule, draws: Draws | None = None,
                   rng: np.random.Generator | None = None) -> Tensor:
    items = np.concatenate([group.positives, group.negatives])[None]
    if draws is None:
        draws = Draws.sample(rng or np.random.default_rng(cfg.seed), 1, items.shape[1], items.shape[2], sched.T, cfg.noise)
    feats = None if group.features is None else np.asarray(group.features)[None]
    s = batch_scores(items, np.asarray(group.condition)[None], feats, draws, model, ref, sched)
    s_pos, s_neg = _split(s, len(group.positives))
    return group_loss_from_scores(s_pos, s_neg, cfg.beta)


def pairwise_dpo_loss(x_p, x_n, c, features, cfg: DpoConfig, model: DiffusionModel, ref: DiffusionModel,
                      sched: NoiseSchedule, draws: Draws | None = None,
                      rng: np.random.Generator | None = None) -> Tensor:
    items = np.stack([np.asarray(x_p, dtype=np.float64), np.asarray(x_n, dtype=np.float64)])[None]
    if draws is None:
        draws = Draws.sample(rng or np.random.default_rng(cfg.seed), 1, 2, items.shape[2], sched.T, cfg.noise)
    feats = None if features is None else np.asarray(features)[None]
    s = batch_scores(items, np.asarray(c)[None], feats, draws, model, ref, sched)
    s_p, s_n = _split(s, 1)
    return pairwise_loss_from_scores(s_p, s_n, cfg.beta)


@dataclass
class GroupBatchData:
    """Dense training tensors: candidates sorted positives-first, equal |P| across groups."""

    items: np.ndarray        # (G, N, D)
    conditions: np.ndarray   # (G, cond_dim)
    features: np.ndarray     # (G, F)
    k_positive: int

    def __len__(self) -> int:
        return len(self.items)


def group_batch_data(records, features_by_user, condition_of) -> GroupBatchData:
    """Build dense arrays from group records; candidates are reordered positives first."""
    if not records:
        raise DegenerateInputError("no records")
    items, conds, feats, ks = [], [], [], set()
    for rec in records:
        labels = np.asarray(rec.labels)
        order = np.concatenate([np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)])
        ks.add(int(labels.sum()))
        items.append(np.asarray(rec.items, dtype=np.float64)[order])
        conds.append(np.asarray(condition_of(rec), dtype=np.float64))
        feats.append(np.asarray(features_by_user[rec.user_id], dtype=np.int64))
    if len(ks) != 1:
        raise ContractError(f"records mix different positive counts {sorted(ks)}")
    k = ks.pop()
    if k < 1 or k >= items[0].shape[0]:
        raise DegenerateInputError("every group needs positives and negatives")
    return GroupBatchData(np.stack(items), np.stack(conds), np.stack(feats), k)


@dataclass
class DpoTrace:
    rows: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["mean_loss"] for r in self.rows]


def train_group_dpo(data: GroupBatchData, model: DiffusionModel, ref: DiffusionModel, sched: NoiseSchedule,
                    cfg: DpoConfig, personalize: bool = True, pairwise: bool = False,
                    on_step: Callable[[dict], None] | None = None) -> DpoTrace:
    """Mini-batch AdamW on the group objective; trainable set is whatever ``model`` marks trainable.

    ``pairwise`` trains on one random (positive, negative) pair per group
    instead of the full group.
    """
    if len(data) == 0:
        raise DegenerateInputError("empty dataset")
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ContractError("model has no trainable parameters")
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_steps)
    rng, pair_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    trace = DpoTrace()
    n_groups, n, d = data.items.shape
    k = data.k_positive
    order = rng.permutation(n_groups)
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > n_groups:
            order, cursor = rng.permutation(n_groups), 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        items = data.items[idx]
        n_pos = k
        if pairwise:
            pi = pair_rng.integers(0, k, size=len(idx))
            ni = pair_rng.integers(k, n, size=len(idx))
            items = np.stack([items[np.arange(len(idx)), pi], items[np.arange(len(idx)), ni]], axis=1)
            n_pos = 1
        draws = Draws.sample(rng, len(idx), items.shape[1], d, sched.T, cfg.noise)
        feats = data.features[idx] if personalize else None
        opt.zero_grad()
        s = batch_scores(items, data.conditions[idx], feats, draws, model, ref, sched)
        s_pos, s_neg = _split(s, n_pos)
        loss = group_loss_from_scores(s_pos, s_neg, cfg.beta)
        loss.backward()
        opt.step()
        row = {"step": step, "mean_loss": loss.item(), "mean_s_pos": float(s_pos.data.mean()),
               "mean_s_neg": float(s_neg.data.mean())}
        trace.rows.append(row)
        if on_step is not None:
            on_step(row)
    return trace


def reference_loss(k: int, m: int) -> float:
    """Per-group loss when the model equals the reference: k * -log sigmoid(-ln m)."""
    return k * math.log1p(m)
