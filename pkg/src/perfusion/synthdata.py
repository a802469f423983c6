"""Synthetic multi-user preference world.

Users carry categorical features.  A hidden style vector is the sum of
per-field embeddings of those features, so style is a learnable function of
what models are allowed to see.  Prompts are unit condition vectors rendered
into item space by a hidden matrix.  The oracle scores an item as

    w_c * cos(item, render(c)) + w_s * cos(item - render(c), style_offset(user)) + noise

and a group's labels mark its top-K candidates.  In style-only mode every
candidate sits at the same angle to ``render(c)``, so labels carry no
user-independent signal.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from perfusion.errors import ConfigError

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 200
    cardinalities: tuple[int, ...] = (8, 8, 8, 8)
    item_dim: int = 32
    cond_dim: int = 8
    style_dim: int = 8
    n_prompts: int = 50
    group_size: int = 5
    k_positive: int = 2
    n_records: int = 4000
    n_pretrain_records: int = 2000
    min_records_per_user: int = 10
    consistency_weight: float = 1.0
    style_weight: float = 1.0
    oracle_noise: float = 0.0
    item_noise: float = 0.5
    offset_scale: float = 0.8
    style_only: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        self.validate()

    def validate(self) -> None:
        if not self.cardinalities:
            raise ConfigError("at least one feature field is required")
        if any(c <= 0 for c in self.cardinalities):
            raise ConfigError(f"feature cardinalities must be positive, got {self.cardinalities}")
        if not 0 < self.k_positive < self.group_size:
            raise ConfigError(
                f"need 0 < k_positive < group_size, got k_positive={self.k_positive}, group_size={self.group_size}"
            )
        if self.n_users < 2:
            raise ConfigError("n_users must be at least 2 (distractor styles come from other users)")
        for name in ("item_dim", "cond_dim", "style_dim", "n_prompts", "n_records"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.oracle_noise < 0 or self.item_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cardinalities"] = list(self.cardinalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorldConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OracleParams:
    field_style: list[np.ndarray]
    prompt_render: np.ndarray
    style_render: np.ndarray
    consistency_weight: float
    style_weight: float
    noise: float


@dataclass
class World:
    cfg: WorldConfig
    features: np.ndarray          # (n_users, F) int
    conditions: np.ndarray        # (n_prompts, cond_dim) unit rows
    oracle: OracleParams
    styles: np.ndarray = field(init=False)          # (n_users, style_dim)
    style_offsets: np.ndarray = field(init=False)   # (n_users, item_dim)

    def __post_init__(self):
        self.styles = style_vectors(self.features, self.oracle)
        self.style_offsets = self.styles @ self.oracle.style_render

    def render(self, condition: np.ndarray) -> np.ndarray:
        return np.asarray(condition) @ self.oracle.prompt_render


@dataclass
class GroupRecord:
    user_id: int
    features: list[int]
    prompt_id: int
    condition: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps({
            "user_id": int(self.user_id),
            "features": [int(f) for f in self.features],
            "prompt_id": int(self.prompt_id),
            "condition": [float(v) for v in self.condition],
            "items": [[float(v) for v in row] for row in self.items],
            "labels": [int(v) for v in self.labels],
            "split": self.split,
        })

    @classmethod
    def from_json(cls, line: str) -> GroupRecord:
        d = json.loads(line)
        return cls(
            user_id=d["user_id"], features=d["features"], prompt_id=d["prompt_id"],
            condition=np.asarray(d["condition"], dtype=np.float64),
            items=np.asarray(d["items"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=np.int64), split=d["split"],
        )


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def style_vectors(features: np.ndarray, oracle: OracleParams) -> np.ndarray:
    feats = np.atleast_2d(features)
    return sum(oracle.field_style[f][feats[:, f]] for f in range(feats.shape[1]))


def generate_world(cfg: WorldConfig) -> World:
    cfg.validate()
    r_oracle, r_users, r_prompts = _streams(cfg.seed, 3)
    tables = [r_oracle.normal(size=(card, cfg.style_dim)) for card in cfg.cardinalities]
    # centred per field, so the population has no shared taste a user-blind scorer could exploit
    tables = [t - t.mean(axis=0) if len(t) > 1 else t for t in tables]
    oracle = OracleParams(
        field_style=tables,
        prompt_render=r_oracle.normal(size=(cfg.cond_dim, cfg.item_dim)),
        style_render=r_oracle.normal(size=(cfg.style_dim, cfg.item_dim)),
        consistency_weight=cfg.consistency_weight,
        style_weight=cfg.style_weight,
        noise=cfg.oracle_noise,
    )
    features = np.stack([r_users.integers(0, card, size=cfg.n_users) for card in cfg.cardinalities], axis=1)
    cond = r_prompts.normal(size=(cfg.n_prompts, cfg.cond_dim))
    cond /= np.linalg.norm(cond, axis=1, keepdims=True)
    return World(cfg=cfg, features=features, conditions=cond, oracle=oracle)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def oracle_score(items: np.ndarray, condition: np.ndarray, style_offset: np.ndarray, oracle: OracleParams,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Oracle preference of one user for each row of ``items`` (vectorized over rows)."""
    items = np.asarray(items, dtype=np.float64)
    r = np.asarray(condition) @ oracle.prompt_render
    score = oracle.consistency_weight * _cos(items, r)
    if oracle.style_weight:
        score = score + oracle.style_weight * _cos(items - r, style_offset)
    if oracle.noise > 0.0:
        if rng is None:
            raise ValueError("oracle noise > 0 requires an rng")
        score = score + oracle.noise * rng.normal(size=score.shape)
    return score


def top_k_labels(scores: np.ndarray, k: int) -> np.ndarray:
    """1 for the k highest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    labels = np.zeros(len(scores), dtype=np.int64)
    labels[order[:k]] = 1
    return labels


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_candidates(world: World, user_id: int, prompt_id: int, rng: np.random.Generator) -> np.ndarray:
    """Candidate items: render(c) plus offsets blending this user's style with a distractor's."""
    cfg = world.cfg
    n, d = cfg.group_size, cfg.item_dim
    r = world.render(world.conditions[prompt_id])
    r_norm = np.linalg.norm(r)
    others = rng.integers(0, cfg.n_users - 1, size=n)
    others = others + (others >= user_id)
    lam = rng.uniform(0.0, 1.0, size=(n, 1))
    own = _unit(world.style_offsets[user_id])
    dirs = lam * own + (1.0 - lam) * _unit(world.style_offsets[others])
    dirs = dirs + cfg.item_noise * rng.normal(size=(n, d))
    if cfg.style_only:
        r_hat = r / r_norm
        dirs = dirs - np.outer(dirs @ r_hat, r_hat)
        mags = np.full((n, 1), cfg.offset_scale * r_norm)
    else:
        mags = rng.uniform(0.25, 1.5, size=(n, 1)) * cfg.offset_scale * r_norm
    return r + mags * _unit(dirs)


def make_group(world: World, user_id: int, prompt_id: int, rng: np.random.Generator) -> GroupRecord:
    items = make_candidates(world, user_id, prompt_id, rng)
    cond = world.conditions[prompt_id]
    noise_rng = rng if world.oracle.noise > 0 else None
    scores = oracle_score(items, cond, world.style_offsets[user_id], world.oracle, noise_rng)
    return GroupRecord(
        user_id=user_id, features=list(world.features[user_id]), prompt_id=prompt_id,
        condition=cond.copy(), items=items, labels=top_k_labels(scores, world.cfg.k_positive),
    )


def make_pretrain_group(world: World, rng: np.random.Generator) -> GroupRecord:
    """Consistency-only group: candidates mix this prompt's render with other prompts'."""
    cfg = world.cfg
    n = cfg.group_size
    user_id = int(rng.integers(cfg.n_users))
    prompt_id = int(rng.integers(cfg.n_prompts))
    r = world.render(world.conditions[prompt_id])
    r_norm = np.linalg.norm(r)
    own = rng.uniform(size=n) < 0.5
    src = np.where(own, prompt_id, rng.integers(0, cfg.n_prompts, size=n))
    base = world.conditions[src] @ world.oracle.prompt_render
    dirs = _unit(rng.normal(size=(n, cfg.item_dim)))
    mags = rng.uniform(0.25, 1.5, size=(n, 1)) * cfg.offset_scale * r_norm
    items = base + mags * dirs
    scores = world.oracle.consistency_weight * _cos(items, r)
    return GroupRecord(
        user_id=user_id, features=list(world.features[user_id]), prompt_id=prompt_id,
        condition=world.conditions[prompt_id].copy(), items=items, labels=top_k_labels(scores, cfg.k_positive),
        split="pretrain",
    )


def _assign_users(cfg: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    base = np.repeat(np.arange(cfg.n_users), cfg.min_records_per_user)
    if len(base) >= cfg.n_records:
        users = np.tile(np.arange(cfg.n_users), cfg.n_records // cfg.n_users + 1)[: cfg.n_records]
    else:
        users = np.concatenate([base, rng.integers(0, cfg.n_users, size=cfg.n_records - len(base))])
    return users


def split_records(records: list[GroupRecord], rng: np.random.Generator) -> None:
    """Seeded 8:1:1 split at record level; every user keeps at least one train record."""
    n = len(records)
    order = rng.permutation(n)
    n_train = n * 8 // 10
    n_valid = n // 10
    tags = np.empty(n, dtype=object)
    tags[order[:n_train]] = "train"
    tags[order[n_train:n_train + n_valid]] = "valid"
    tags[order[n_train + n_valid:]] = "test"
    users = np.array([r.user_id for r in records])
    for uid in np.unique(users):
        mine = np.flatnonzero(users == uid)
        if np.any(tags[mine] == "train"):
            continue
        train_counts = {u: int(np.sum((users == u) & (tags == "train"))) for u in np.unique(users)}
        donor = next(i for i in order[:n_train] if tags[i] == "train" and train_counts[users[i]] > 1)
        mover = mine[0]
        tags[donor], tags[mover] = tags[mover], "train"
    for rec, tag in zip(records, tags):
        rec.split = str(tag)


def generate_records(world: World) -> tuple[list[GroupRecord], list[GroupRecord]]:
    cfg = world.cfg
    r_assign, r_groups, r_split, r_pre = _streams(cfg.seed + 1_000_003, 4)
    users = _assign_users(cfg, r_assign)
    prompts = r_assign.integers(0, cfg.n_prompts, size=len(users))
    records = [make_group(world, int(u), int(p), r_groups) for u, p in zip(users, prompts)]
    split_records(records, r_split)
    pretrain = [make_pretrain_group(world, r_pre) for _ in range(cfg.n_pretrain_records)]
    return records, pretrain


def write_jsonl(path: Path, records: Iterable[GroupRecord]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def read_jsonl(path: str | Path) -> list[GroupRecord]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return [GroupRecord.from_json(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OSError(f"failed reading {path}: {exc}") from exc


def emit_dataset(world: World, out_dir: str | Path) -> dict[str, Path]:
    """Write train/valid/test JSONL, the backbone-pretraining JSONL and the world config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, pretrain = generate_records(world)
    paths: dict[str, Path] = {}
    for split in SPLITS:
        paths[split] = out / f"{split}.jsonl"
        write_jsonl(paths[split], (r for r in records if r.split == split))
    paths["pretrain"] = out / "pretrain.jsonl"
    write_jsonl(paths["pretrain"], pretrain)
    paths["world"] = out / "world.json"
    paths["world"].write_text(json.dumps(world.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return paths


def load_world_config(path: str | Path) -> WorldConfig:
    return WorldConfig.from_dict(json.loads(Path(path).read_text()))


def load_split(data_dir: str | Path, split: str) -> list[GroupRecord]:
    return read_jsonl(Path(data_dir) / f"{split}.jsonl")


def records_by_split(records: Sequence[GroupRecord]) -> dict[str, list[GroupRecord]]:
    out: dict[str, list[GroupRecord]] = {s: [] for s in SPLITS}
    for r in records:
        out.setdefault(r.split, []).append(r)
    return out
