"""Experiment pipelines shared by the command line and the acceptance suite.

Everything is driven by one flat :class:`ExperimentConfig`.  Each pipeline is
a pure function of (config, input records) so results are reproducible.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from perfusion.diffusion import DiffusionModel, NoiseSchedule, SftConfig, UNetGeometry, sample, train_sft
from perfusion.errors import ConfigError, ContractError, DegenerateInputError
from perfusion.groupdpo import DpoConfig, DpoTrace, GroupBatchData, group_batch_data, train_group_dpo
from perfusion.numerics import no_grad
from perfusion.reward import (
    RewardModel,
    RMTrainConfig,
    WIRING_MODES,
    gauc_metric,
    map_metric,
    pretrain_backbone,
    score_records,
    train_rm,
)
from perfusion.synthdata import GroupRecord, World, WorldConfig, oracle_score

MODES = ("sft", "pairwise_dpo", "group_dpo")
VARIANTS = {
    # name: (mode, personalization)
    "full": ("group_dpo", True),
    "wo_pan": ("group_dpo", False),
    "wo_gobj": ("sft", True),
    "wo_both": ("sft", False),
}
_WORLD_KEYS = {f.name for f in fields(WorldConfig)} - {"seed"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    # world
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
    # reward model
    rm_wiring: str = "duplicated"
    rm_pretrain_epochs: int = 5
    rm_epochs: int = 10
    rm_batch_size: int = 32
    rm_lr: float = 1e-3
    rm_warmup_steps: int = 500
    rm_weight_decay: float = 1e-2
    # diffusion
    t_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    unet_widths: tuple[int, int, int] = (64, 48, 32)
    mode: str = "group_dpo"
    personalization: bool = True
    sft_data: str = "positives"
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    steps: int = 1000
    sft_batch_size: int = 64
    dpo_batch_size: int = 64
    branch_lr: float = 1e-3
    backbone_lr: float = 1e-4     # production-scale runs used 1e-8
    diffusion_weight_decay: float = 1e-2
    diffusion_warmup_steps: int = 0
    beta: float = 0.3
    dpo_noise: str = "independent"
    two_phase: bool = False
    phase1_steps: int = 500
    # evaluation
    eval_split: str = "test"
    eval_pairs: int = 300
    samples_per_pair: int = 1

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        self.unet_widths = tuple(int(w) for w in self.unet_widths)
        self.validate()

    def validate(self) -> None:
        self.world_config()  # raises ConfigError on bad world settings
        if self.rm_wiring not in WIRING_MODES:
            raise ConfigError(f"rm_wiring must be one of {WIRING_MODES}, got {self.rm_wiring!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sft_data not in ("positives", "all"):
            raise ConfigError("sft_data must be 'positives' or 'all'")
        if self.dpo_noise not in ("independent", "shared"):
            raise ConfigError("dpo_noise must be 'independent' or 'shared'")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if len(self.unet_widths) != 3:
            raise ConfigError("unet_widths needs three entries")
        if self.t_steps < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("noise schedule needs t_steps >= 1 and 0 < beta_start <= beta_end < 1")
        for name in ("steps", "pretrain_steps", "phase1_steps", "rm_epochs", "rm_pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("sft_batch_size", "dpo_batch_size", "rm_batch_size", "eval_pairs", "samples_per_pair"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    # --- views -----------------------------------------------------------------

    def world_config(self) -> WorldConfig:
        return WorldConfig(seed=self.seed, **{k: getattr(self, k) for k in _WORLD_KEYS})

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.t_steps, self.beta_start, self.beta_end)

    def unet_geometry(self) -> UNetGeometry:
        return UNetGeometry(item_dim=self.item_dim, cond_dim=self.cond_dim, widths=self.unet_widths)

    def rm_train_config(self, epochs: int | None = None) -> RMTrainConfig:
        return RMTrainConfig(epochs=self.rm_epochs if epochs is None else epochs, batch_size=self.rm_batch_size,
                             lr=self.rm_lr, warmup_steps=self.rm_warmup_steps,
                             weight_decay=self.rm_weight_decay, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cardinalities"] = list(self.cardinalities)
        d["unet_widths"] = list(self.unet_widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> ExperimentConfig:
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def coerce_value(key: str, raw: str):
    """Parse a command-line override into the type of the config field ``key``."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = str(types[key])
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(v) for v in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


# -----------------------------------------------------------------------------
# reward model
# -----------------------------------------------------------------------------


def new_reward_model(cfg: ExperimentConfig, wiring: str | None = None) -> RewardModel:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    return RewardModel(rng, cfg.cardinalities, wiring=wiring or cfg.rm_wiring)


def pretrained_backbone_state(cfg: ExperimentConfig, pretrain_records: Sequence[GroupRecord]) -> dict:
    rm = new_reward_model(cfg)
    pretrain_backbone(pretrain_records, rm, cfg.rm_train_config(cfg.rm_pretrain_epochs))
    return rm.backbone.state()


def fit_reward_model(cfg: ExperimentConfig, backbone_state: dict, train: Sequence[GroupRecord],
                     wiring: str | None = None, log_fn: Callable[[str], None] | None = None) -> tuple[RewardModel, list[float]]:
    rm = new_reward_model(cfg, wiring)
    rm.backbone.load_state(backbone_state)
    curve = train_rm(train, rm, cfg.rm_train_config(), log_fn)
    return rm, curve


@dataclass(frozen=True)
class RMEval:
    split: str
    variant: str
    map: float
    gauc: float
    n_groups: int
    n_skipped: int


def evaluate_reward_model(rm: RewardModel, records: Sequence[GroupRecord], split: str, variant: str,
                          personalize: bool = True) -> RMEval:
    scores = score_records(rm, records, personalize)
    m = map_metric(records, scores)
    g = gauc_metric(records, scores)
    return RMEval(split, variant, m.value, g.value, g.n_groups, g.n_skipped)


# -----------------------------------------------------------------------------
# diffusion
# -----------------------------------------------------------------------------


def data_scale(train: Sequence[GroupRecord]) -> float:
    items = np.concatenate([r.items for r in train])
    return float(np.sqrt(np.mean(items * items)))


def _flatten(records: Sequence[GroupRecord], positives_only: bool):
    z, c, f = [], [], []
    for r in records:
        keep = np.asarray(r.labels) == 1 if positives_only else np.ones(len(r.labels), dtype=bool)
        z.append(r.items[keep])
        c.append(np.repeat(r.condition[None], keep.sum(), axis=0))
        f.append(np.repeat(np.asarray(r.features, dtype=np.int64)[None], keep.sum(), axis=0))
    return np.concatenate(z), np.concatenate(c), np.concatenate(f)


def pretrain_diffusion(cfg: ExperimentConfig, train: Sequence[GroupRecord],
                       log_fn: Callable[[str], None] | None = None) -> tuple[DiffusionModel, list[float]]:
    """Unpersonalized denoiser fitted to every training candidate; the reference for later stages."""
    if not train:
        raise DegenerateInputError("no training records")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 21]))
    model = DiffusionModel.create(rng, cfg.unet_geometry(), data_scale=data_scale(train))
    z, c, _ = _flatten(train, positives_only=False)
    curve = train_sft(model, z, c, None, cfg.schedule(),
                      SftConfig(steps=cfg.pretrain_steps, batch_size=cfg.sft_batch_size, learning_rate=cfg.pretrain_lr,
                                weight_decay=cfg.diffusion_weight_decay, warmup_steps=cfg.diffusion_warmup_steps,
                                seed=cfg.seed))
    model.set_trainable(False)
    if log_fn:
        log_fn(f"pretrain: final loss {np.mean(curve[-50:]):.5f}")
    return model, curve


def _prepare(cfg: ExperimentConfig, reference: DiffusionModel, personalization: bool) -> DiffusionModel:
    model = copy.deepcopy(reference)
    model.set_trainable(False)
    if personalization:
        model.add_branch(np.random.default_rng(np.random.SeedSequence([cfg.seed, 31])), cfg.cardinalities)
    else:
        model.branch = None
        model.backbone.set_trainable(True)
    return model


def _dpo_config(cfg: ExperimentConfig, steps: int, lr: float, seed_offset: int = 0) -> DpoConfig:
    return DpoConfig(beta=cfg.beta, steps=steps, batch_size=cfg.dpo_batch_size, learning_rate=lr,
                     weight_decay=cfg.diffusion_weight_decay, warmup_steps=cfg.diffusion_warmup_steps,
                     noise=cfg.dpo_noise, seed=cfg.seed + seed_offset)


@dataclass
class DiffusionRun:
    model: DiffusionModel
    reference: DiffusionModel
    rows: list[dict] = field(default_factory=list)   # step, mean_loss, mean_s_pos, mean_s_neg


def train_diffusion(cfg: ExperimentConfig, reference: DiffusionModel, train: Sequence[GroupRecord],
                    mode: str | None = None, personalization: bool | None = None,
                    log_fn: Callable[[str], None] | None = None) -> DiffusionRun:
    """One fine-tuning stage on top of a frozen reference checkpoint.

    personalization on: only the new branch trains (``branch_lr``);
    off: the whole backbone trains (``backbone_lr``) and no branch exists.
    """
    mode = mode or cfg.mode
    personalization = cfg.personalization if personalization is None else personalization
    if not train:
        raise DegenerateInputError("no training records")
    sched = cfg.schedule()
    ref = reference.frozen_copy()
    rows: list[dict] = []
    if mode == "sft":
        model = _prepare(cfg, ref, personalization)
        z, c, f = _flatten(train, positives_only=cfg.sft_data == "positives")
        lr = cfg.branch_lr if personalization else cfg.backbone_lr
        curve = train_sft(model, z, c, f if personalization else None, sched,
                          SftConfig(steps=cfg.steps, batch_size=cfg.sft_batch_size, learning_rate=lr,
                                    weight_decay=cfg.diffusion_weight_decay,
                                    warmup_steps=cfg.diffusion_warmup_steps, seed=cfg.seed))
        rows = [{"step": i + 1, "mean_loss": v, "mean_s_pos": float("nan"), "mean_s_neg": float("nan")}
                for i, v in enumerate(curve)]
        model.set_trainable(False)
        return DiffusionRun(model, ref, rows)

    data = group_batch_data(list(train), {r.user_id: r.features for r in train}, lambda r: r.condition)
    if cfg.two_phase and personalization:
        # phase 1: pairwise preference alignment of the backbone; it becomes the new reference
        phase1 = _prepare(cfg, ref, False)
        trace = train_group_dpo(data, phase1, ref, sched, _dpo_config(cfg, cfg.phase1_steps, cfg.backbone_lr, 1),
                                personalize=False, pairwise=True)
        rows.extend({**r, "phase": 1} for r in trace.rows)
        phase1.set_trainable(False)
        ref = phase1.frozen_copy()
    model = _prepare(cfg, ref, personalization)
    lr = cfg.branch_lr if personalization else cfg.backbone_lr
    trace: DpoTrace = train_group_dpo(data, model, ref, sched, _dpo_config(cfg, cfg.steps, lr),
                                      personalize=personalization, pairwise=mode == "pairwise_dpo")
    rows.extend(trace.rows)
    model.set_trainable(False)
    if log_fn:
        log_fn(f"{mode}: final loss {np.mean(trace.losses[-50:]):.5f}")
    return DiffusionRun(model, ref, rows)


def eval_pairs(cfg: ExperimentConfig, records: Sequence[GroupRecord]) -> list[tuple[int, int]]:
    """Distinct (user, prompt) pairs of the evaluation split, capped at ``eval_pairs``."""
    pairs = sorted({(int(r.user_id), int(r.prompt_id)) for r in records if r.split == cfg.eval_split})
    if not pairs:
        raise DegenerateInputError(f"no records in split {cfg.eval_split!r}")
    return pairs[: cfg.eval_pairs]


@dataclass
class GeneratedItem:
    user_id: int
    prompt_id: int
    seed: int
    item: np.ndarray


def generate_items(cfg: ExperimentConfig, model: DiffusionModel, pairs: Sequence[tuple[int, int]],
                   conditions: np.ndarray, user_features: dict[int, Sequence[int]]) -> list[GeneratedItem]:
    """``samples_per_pair`` samples for each pair; sample seeds are shared across models for pairing."""
    rows = [(u, p, cfg.seed * 1_000_003 + i * cfg.samples_per_pair + j)
            for i, (u, p) in enumerate(pairs) for j in range(cfg.samples_per_pair)]
    c = np.stack([conditions[p] for _, p, _ in rows])
    f = np.stack([np.asarray(user_features[u], dtype=np.int64) for u, _, _ in rows])
    xs = sample(model, c, f, cfg.schedule(), [s for _, _, s in rows])
    return [GeneratedItem(u, p, s, x) for (u, p, s), x in zip(rows, xs)]


def oracle_scores(world: World, items: Sequence[GeneratedItem]) -> np.ndarray:
    return np.array([oracle_score(g.item[None], world.conditions[g.prompt_id], world.style_offsets[g.user_id],
                                  world.oracle)[0] for g in items])


def reward_scores(rm: RewardModel, world_conditions: np.ndarray, user_features: dict[int, Sequence[int]],
                  items: Sequence[GeneratedItem]) -> np.ndarray:
    if not items:
        return np.zeros(0)
    c = np.stack([world_conditions[g.prompt_id] for g in items])
    x = np.stack([g.item for g in items])[:, None, :]
    f = np.stack([np.asarray(user_features[g.user_id], dtype=np.int64) for g in items])
    out = []
    with no_grad():
        for start in range(0, len(items), 256):
            sl = slice(start, start + 256)
            out.append(rm.group_scores(c[sl], x[sl], f[sl]).data[:, 0])
    return np.concatenate(out)


def per_pair_means(items: Sequence[GeneratedItem], scores: np.ndarray) -> dict[tuple[int, int], float]:
    acc: dict[tuple[int, int], list[float]] = {}
    for g, s in zip(items, scores):
        acc.setdefault((g.user_id, g.prompt_id), []).append(float(s))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def paired_win_rate(a: dict, b: dict) -> float:
    """Fraction of shared pairs where ``a`` beats ``b`` (ties count half)."""
    keys = sorted(set(a) & set(b))
    if not keys:
        raise ContractError("no shared pairs to compare")
    wins = sum(1.0 if a[k] > b[k] else 0.5 if a[k] == b[k] else 0.0 for k in keys)
    return wins / len(keys)


@dataclass
class AblationResult:
    seed: int
    oracle: dict[str, float]                # variant -> mean oracle score
    per_pair: dict[str, dict]               # variant -> {(user, prompt): mean oracle score}
    models: dict[str, DiffusionModel] = field(repr=False, default_factory=dict)


def run_generation_ablation(cfg: ExperimentConfig, world: World, records: Sequence[GroupRecord],
                            variants: Sequence[str] = tuple(VARIANTS),
                            log_fn: Callable[[str], None] | None = None) -> AblationResult:
    """Pretrain a reference denoiser, fine-tune each variant from it, score samples with the oracle."""
    train = [r for r in records if r.split == "train"]
    base, _ = pretrain_diffusion(cfg, train, log_fn)
    pairs = eval_pairs(cfg, records)
    feats = {u: world.features[u] for u in range(world.cfg.n_users)}
    models = {"base": base}
    for name in variants:
        mode, pers = VARIANTS[name]
        models[name] = train_diffusion(cfg, base, train, mode, pers, log_fn).model
    oracle, per_pair = {}, {}
    for name, model in models.items():
        items = generate_items(cfg, model, pairs, world.conditions, feats)
        scores = oracle_scores(world, items)
        oracle[name] = float(scores.mean())
        per_pair[name] = per_pair_means(items, scores)
        if log_fn:
            log_fn(f"{name}: mean oracle score {oracle[name]:.4f}")
    return AblationResult(cfg.seed, oracle, per_pair, models)
