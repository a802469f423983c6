"""Personalized two-tower reward model.

A text tower and an item tower (pre-norm transformers) are pretrained on
prompt consistency and then frozen.  Personalized plug-ins, a cross network
producing ``u`` plus zero-initialized adaptive networks, add ``u``-dependent
vectors to every token's hidden state before each attention and each
feed-forward sublayer.  The score of a (prompt, item) pair is the cosine of
the two pooled vectors; a group's scores are trained against the normalized
label distribution with a Bernoulli-style cross-entropy over the softmax.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from perfusion.errors import DegenerateInputError, DimensionError
from perfusion.numerics import (
    AdamW,
    Linear,
    Module,
    Tensor,
    clip,
    cosine_similarity,
    gelu,
    layer_norm,
    log,
    matmul,
    no_grad,
    parameter,
    softmax,
    take,
    tsum,
)
from perfusion.numerics.module import uniform_init
from perfusion.numerics.tensor import add, mul, sub, swapaxes
from perfusion.personalization import AdaptiveNetwork, CrossNetwork
from perfusion.synthdata import GroupRecord

WIRING_MODES = ("duplicated", "shared", "vision_only", "text_only")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class RewardGeometry:
    width: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_width: int = 64
    out_dim: int = 32
    vocab: int = 64
    n_chunks: int = 8
    item_dim: int = 32
    cond_dim: int = 8
    embed_dim: int = 8
    cross_layers: int = 2

    @property
    def text_len(self) -> int:
        return self.cond_dim


def tokenize_condition(conditions: np.ndarray, vocab: int = 64) -> np.ndarray:
    """Prompt tokens: coordinate j of a unit condition vector, binned, becomes token j*bins + bin."""
    c = np.atleast_2d(conditions)
    dim = c.shape[1]
    bins = vocab // dim
    if bins < 1:
        raise DimensionError(f"vocabulary {vocab} too small for {dim} condition coordinates")
    idx = np.clip(np.floor((c + 1.0) / 2.0 * bins), 0, bins - 1).astype(np.int64)
    return idx + np.arange(dim) * bins


# -----------------------------------------------------------------------------
# towers
# -----------------------------------------------------------------------------


class _Block(Module):
    def __init__(self, rng: np.random.Generator, width: int, n_heads: int, ffn_width: int):
        if width % n_heads:
            raise DimensionError("width must be divisible by n_heads")
        self.n_heads = n_heads
        self.ln1_g = parameter(np.ones(width))
        self.ln1_b = parameter(np.zeros(width))
        self.qkv = Linear(rng, width, 3 * width)
        self.proj = Linear(rng, width, width)
        self.ln2_g = parameter(np.ones(width))
        self.ln2_b = parameter(np.zeros(width))
        self.ff1 = Linear(rng, width, ffn_width)
        self.ff2 = Linear(rng, ffn_width, width)

    def attention(self, h: Tensor) -> Tensor:
        b, t, w = h.shape
        nh = self.n_heads
        dh = w // nh
        x = layer_norm(h, self.ln1_g, self.ln1_b)
        qkv = self.qkv(x).reshape(b, t, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax(mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh)), axis=-1)
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, w)
        return self.proj(out)

    def ffn(self, h: Tensor) -> Tensor:
        return self.ff2(gelu(self.ff1(layer_norm(h, self.ln2_g, self.ln2_b))))


def _inject(h: Tensor, vec: Tensor | None) -> Tensor:
    if vec is None:
        return h
    return add(h, vec.reshape(vec.shape[0], 1, vec.shape[-1]))


class Tower(Module):
    """Transformer encoder over text tokens or item chunks, mean-pooled and projected."""

    def __init__(self, rng: np.random.Generator, kind: str, geo: RewardGeometry):
        if kind not in ("text", "item"):
            raise ValueError(f"unknown tower kind {kind!r}")
        self.kind = kind
        w = geo.width
        if kind == "text":
            self.token_embed = parameter(rng.normal(0.0, 0.5, size=(geo.vocab, w)))
            self.pos_embed = parameter(rng.normal(0.0, 0.1, size=(geo.text_len, w)))
        else:
            if geo.item_dim % geo.n_chunks:
                raise DimensionError("item_dim must be divisible by n_chunks")
            chunk = geo.item_dim // geo.n_chunks
            self.n_chunks = geo.n_chunks
            self.chunk_proj = parameter(uniform_init(rng, chunk, (geo.n_chunks, chunk, w)))
            self.pos_embed = parameter(rng.normal(0.0, 0.1, size=(geo.n_chunks, w)))
        self.blocks = [_Block(rng, w, geo.n_heads, geo.ffn_width) for _ in range(geo.n_layers)]
        self.pool = Linear(rng, w, geo.out_dim)
        self.frozen = False

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def embed_inputs(self, x: np.ndarray) -> Tensor:
        if self.kind == "text":
            tokens = np.asarray(x, dtype=np.int64)
            if tokens.ndim != 2 or tokens.shape[1] == 0:
                raise DegenerateInputError("text tower needs a non-empty (batch, tokens) array")
            b, t = tokens.shape
            emb = take(self.token_embed, tokens.reshape(-1)).reshape(b, t, -1)
            return add(emb, self.pos_embed[:t].reshape(1, t, -1))
        items = np.asarray(x, dtype=np.float64)
        if items.ndim != 2 or items.shape[1] == 0:
            raise DegenerateInputError("item tower needs a non-empty (batch, item_dim) array")
        b = items.shape[0]
        chunks = Tensor(items.reshape(b, self.n_chunks, -1).transpose(1, 0, 2))
        emb = matmul(chunks, self.chunk_proj).transpose(1, 0, 2)
        return add(emb, self.pos_embed.reshape(1, self.n_chunks, -1))

    def __call__(self, x: np.ndarray, injections: Sequence[tuple[Tensor | None, Tensor | None]] | None = None,
                 trace: list | None = None) -> Tensor:
        h = self.embed_inputs(x)
        for l, block in enumerate(self.blocks):
            u_attn, u_ffn = injections[l] if injections is not None else (None, None)
            h = _inject(h, u_attn)
            if trace is not None:
                trace.append(("pre_attn", l, h.data.copy()))
            h = add(h, block.attention(h))
            h = _inject(h, u_ffn)
            if trace is not None:
                trace.append(("pre_ffn", l, h.data.copy()))
            h = add(h, block.ffn(h))
        return self.pool(h.mean(axis=1))


class Plugin(Module):
    """Cross network plus per-layer attention/FFN adaptive networks for one tower."""

    def __init__(self, rng: np.random.Generator, cardinalities: Sequence[int], geo: RewardGeometry):
        self.cross = CrossNetwork(rng, cardinalities, geo.embed_dim, geo.cross_layers)
        u_dim = self.cross.out_dim
        self.attn = [AdaptiveNetwork(rng, u_dim, geo.width) for _ in range(geo.n_layers)]
        self.ffn = [AdaptiveNetwork(rng, u_dim, geo.width) for _ in range(geo.n_layers)]

    def injections(self, features: np.ndarray, repeat: int = 1) -> list[tuple[Tensor, Tensor]]:
        u = self.cross(features)
        out = []
        for a, f in zip(self.attn, self.ffn):
            ua, uf = a(u), f(u)
            if repeat > 1:
                rows = np.repeat(np.arange(u.shape[0]), repeat)
                ua, uf = take(ua, rows), take(uf, rows)
            out.append((ua, uf))
        return out


class RewardModel(Module):
    def __init__(self, rng: np.random.Generator, cardinalities: Sequence[int], geo: RewardGeometry = RewardGeometry(),
                 wiring: str = "duplicated"):
        if wiring not in WIRING_MODES:
            raise ValueError(f"wiring must be one of {WIRING_MODES}, got {wiring!r}")
        self.geo = geo
        self.wiring = wiring
        self.cardinalities = tuple(cardinalities)
        self.backbone = _Backbone(rng, geo)
        self._plugin_rng = rng
        self.text_plugin: Plugin | None = None
        self.item_plugin: Plugin | None = None
        if wiring == "shared":
            shared = Plugin(rng, cardinalities, geo)
            self.text_plugin = self.item_plugin = shared
        else:
            if wiring in ("duplicated", "text_only"):
                self.text_plugin = Plugin(rng, cardinalities, geo)
            if wiring in ("duplicated", "vision_only"):
                self.item_plugin = Plugin(rng, cardinalities, geo)

    def plugin_parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for plugin in (self.text_plugin, self.item_plugin):
            if plugin is not None:
                for p in plugin.parameters():
                    seen.setdefault(id(p), p)
        return list(seen.values())

    def plugin_state(self) -> dict[str, np.ndarray]:
        out = {}
        if self.text_plugin is not None:
            out.update({f"text/{k}": v for k, v in self.text_plugin.state().items()})
        if self.item_plugin is not None:
            out.update({f"item/{k}": v for k, v in self.item_plugin.state().items()})
        return out

    def load_plugin_state(self, state: dict[str, np.ndarray]) -> None:
        for side, plugin in (("text", self.text_plugin), ("item", self.item_plugin)):
            if plugin is None:
                continue
            sub_state = {k[len(side) + 1:]: v for k, v in state.items() if k.startswith(side + "/")}
            plugin.load_state(sub_state)

    def freeze_backbone(self) -> None:
        self.backbone.set_trainable(False)
        self.backbone.text.frozen = self.backbone.item.frozen = True

    def group_scores(self, conditions: np.ndarray, items: np.ndarray, features: np.ndarray | None,
                     personalize: bool = True) -> Tensor:
        """Scores for a batch of groups: conditions (B, cond), items (B, N, D), features (B, F)."""
        items = np.asarray(items, dtype=np.float64)
        if items.ndim != 3:
            raise DimensionError("items must be (batch, group, item_dim)")
        b, n, d = items.shape
        tokens = tokenize_condition(conditions, self.geo.vocab)
        use = personalize and features is not None
        text_inj = self.text_plugin.injections(features) if use and self.text_plugin is not None else None
        item_inj = self.item_plugin.injections(features, repeat=n) if use and self.item_plugin is not None else None
        v_text = self.backbone.text(tokens, text_inj)
        v_item = self.backbone.item(items.reshape(b * n, d), item_inj).reshape(b, n, -1)
        return cosine_similarity(v_text.reshape(b, 1, -1), v_item, axis=-1)


class _Backbone(Module):
    def __init__(self, rng: np.random.Generator, geo: RewardGeometry):
        self.text = Tower(rng, "text", geo)
        self.item = Tower(rng, "item", geo)


def tower_forward(tokens, u_features, tower: Tower, plugin: Plugin | None, trace: list | None = None) -> Tensor:
    """Pooled output of one tower; ``u_features`` must be given iff a plug-in is active."""
    if (plugin is None) != (u_features is None):
        raise ValueError("user features must be supplied exactly when a plug-in is active")
    inj = plugin.injections(u_features) if plugin is not None else None
    return tower(tokens, inj, trace)


def score(condition: np.ndarray, item: np.ndarray, features: Sequence[int] | None, rm: RewardModel) -> float:
    with no_grad():
        feats = None if features is None else np.asarray([features])
        return rm.group_scores(np.asarray([condition]), np.asarray([[item]]), feats).data[0, 0]


# -----------------------------------------------------------------------------
# group objective
# -----------------------------------------------------------------------------


def ideal_distribution(labels: Sequence[int]) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64)
    total = y.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateInputError("ideal distribution needs at least one positive label")
    return y / total


def predicted_distribution(scores) -> Tensor:
    return softmax(scores if isinstance(scores, Tensor) else Tensor(scores), axis=-1)


def rm_group_loss(p, p_hat) -> Tensor:
    """-sum_i [p_i log p_hat_i + (1 - p_i) log(1 - p_hat_i)], summed over the last axis.

    Leading axes (a batch of groups) are averaged.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    p_hat = p_hat if isinstance(p_hat, Tensor) else Tensor(p_hat)
    if p_arr.shape != p_hat.shape:
        raise DimensionError(f"p has shape {p_arr.shape}, p_hat has shape {p_hat.shape}")
    q = clip(p_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_item = add(mul(Tensor(p_arr), log(q)), mul(Tensor(1.0 - p_arr), log(sub(1.0, q))))
    per_group = tsum(per_item, axis=-1)
    return -(per_group.mean() if per_group.ndim else per_group)


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------


@dataclass
class RMTrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 500
    weight_decay: float = 1e-2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def batch_arrays(records: Sequence[GroupRecord]) -> dict[str, np.ndarray]:
    return {
        "conditions": np.stack([r.condition for r in records]),
        "items": np.stack([r.items for r in records]),
        "labels": np.stack([r.labels for r in records]),
        "features": np.asarray([r.features for r in records], dtype=np.int64),
    }


def _batch_loss(rm: RewardModel, batch: dict[str, np.ndarray], personalize: bool) -> Tensor:
    scores = rm.group_scores(batch["conditions"], batch["items"], batch["features"], personalize)
    return rm_group_loss(ideal_distribution(batch["labels"]), predicted_distribution(scores))


def mean_loss(rm: RewardModel, records: Sequence[GroupRecord], personalize: bool = True,
              batch_size: int = 256) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            total += _batch_loss(rm, batch_arrays(chunk), personalize).item() * len(chunk)
    return total / len(records)


def _fit(rm: RewardModel, records: Sequence[GroupRecord], params: list[Tensor], cfg: RMTrainConfig,
         personalize: bool, log_fn: Callable[[str], None] | None) -> list[float]:
    if not records:
        raise DegenerateInputError("cannot train on an empty dataset")
    curve = [mean_loss(rm, records, personalize)]
    if cfg.epochs <= 0 or not params:
        return curve
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
    rng = np.random.default_rng(cfg.seed)
    data = batch_arrays(records)
    n = len(records)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = {k: v[idx] for k, v in data.items()}
            opt.zero_grad()
            loss = _batch_loss(rm, batch, personalize)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / n)
        if log_fn:
            log_fn(f"epoch {epoch + 1}: loss {curve[-1]:.6f}")
    return curve


def pretrain_backbone(records: Sequence[GroupRecord], rm: RewardModel, cfg: RMTrainConfig,
                      log_fn: Callable[[str], None] | None = None) -> list[float]:
    """Train both towers without plug-ins, then freeze them."""
    rm.backbone.set_trainable(True)
    for p in rm.plugin_parameters():
        p.requires_grad = False
    curve = _fit(rm, records, rm.backbone.parameters(), cfg, personalize=False, log_fn=log_fn)
    rm.freeze_backbone()
    for p in rm.plugin_parameters():
        p.requires_grad = True
    return curve


def train_rm(records: Sequence[GroupRecord], rm: RewardModel, cfg: RMTrainConfig,
             log_fn: Callable[[str], None] | None = None) -> list[float]:
    """Fine-tune plug-ins (cross networks and adaptive networks) with the backbone frozen."""
    rm.freeze_backbone()
    params = rm.plugin_parameters()
    for p in params:
        p.requires_grad = True
    return _fit(rm, records, params, cfg, personalize=True, log_fn=log_fn)


def score_records(rm: RewardModel, records: Sequence[GroupRecord], personalize: bool = True,
                  batch_size: int = 256) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            b = batch_arrays(records[start:start + batch_size])
            s = rm.group_scores(b["conditions"], b["items"], b["features"], personalize).data
            out.extend(np.array(row) for row in s)
    return out


# -----------------------------------------------------------------------------
# metrics
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricResult:
    value: float
    n_groups: int
    n_skipped: int


def _ranking(scores: np.ndarray) -> np.ndarray:
    return np.lexsort((np.arange(len(scores)), -scores))


def average_precision(labels: Sequence[int], scores: Sequence[float]) -> float:
    y = np.asarray(labels)
    order = _ranking(np.asarray(scores, dtype=np.float64))
    rel = y[order] == 1
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(y) + 1)
    return float(np.sum(hits[rel] / ranks[rel]) / rel.sum())


def group_auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


def _resolve_scores(records, scorer) -> Iterable[np.ndarray]:
    if callable(scorer):
        return (np.asarray(scorer(r), dtype=np.float64) for r in records)
    return (np.asarray(s, dtype=np.float64) for s in scorer)


def map_metric(records: Sequence[GroupRecord], scorer) -> MetricResult:
    """Mean average precision over groups; groups without a positive are skipped."""
    vals, skipped = [], 0
    for rec, s in zip(records, _resolve_scores(records, scorer)):
        if np.sum(rec.labels) == 0:
            skipped += 1
            continue
        vals.append(average_precision(rec.labels, s))
    return MetricResult(float(np.mean(vals)) if vals else float("nan"), len(vals), skipped)


def gauc_metric(records: Sequence[GroupRecord], scorer) -> MetricResult:
    """Mean within-group AUC; groups lacking a positive or a negative are skipped."""
    vals, skipped = [], 0
    for rec, s in zip(records, _resolve_scores(records, scorer)):
        n_pos = int(np.sum(rec.labels))
        if n_pos == 0 or n_pos == len(rec.labels):
            skipped += 1
            continue
        vals.append(group_auc(rec.labels, s))
    return MetricResult(float(np.mean(vals)) if vals else float("nan"), len(vals), skipped)
