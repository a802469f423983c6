"""Command-line experiment runner.

Every command takes one flat JSON config (``--config``) plus overrides
(``--seed``, ``--set KEY=VALUE``; flags win), writes its resolved config and a
run manifest into ``--out``, and is a pure function of (config, input files).

Exit codes: 0 success, 2 config or input error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import perfusion
from perfusion import experiments as ex
from perfusion.diffusion import DiffusionModel
from perfusion.errors import ConfigError, MissingArtifactError, NumericalError, PerfusionError
from perfusion.numerics import load_checkpoint, save_checkpoint
from perfusion.numerics.checkpoint import prefixed, strip_prefix
from perfusion.reward import WIRING_MODES, RewardModel, pretrain_backbone
from perfusion.synthdata import (
    SPLITS,
    GroupRecord,
    emit_dataset,
    generate_world,
    load_world_config,
    read_jsonl,
)

log = logging.getLogger("perfusion")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
TRAIN_CSV = ("step", "mean_loss", "mean_s_pos", "mean_s_neg")
RM_EVAL_CSV = ("run_id", "split", "variant", "map", "gauc", "n_groups", "n_skipped")
GEN_EVAL_CSV = ("run_id", "variant", "n_samples", "oracle_mean", "rm_mean")
WIN_CSV = ("run_id", "metric", "variant_a", "variant_b", "win_rate", "n_pairs")
PRESETS = ("prm-ablation", "pf-ablation")


# -----------------------------------------------------------------------------
# run bookkeeping
# -----------------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def source_revision() -> str:
    """Package version plus a digest of its Python sources (no VCS needed)."""
    root = Path(perfusion.__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")) + sorted(root.rglob("*.pyx")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"perfusion {perfusion.__version__} src:{h.hexdigest()[:12]}"


class Run:
    """One command invocation writing into one output directory."""

    def __init__(self, command: str, cfg: ex.ExperimentConfig, out: Path, inputs: dict[str, Path],
                 options: dict | None = None):
        self.command = command
        self.options = dict(sorted((options or {}).items()))
        self.cfg = cfg
        self.out = out
        self.inputs = {k: Path(v) for k, v in sorted(inputs.items())}
        self.input_digests = {k: _digest_input(p) for k, p in self.inputs.items()}
        key = json.dumps({"command": command, "config": cfg.to_dict(), "inputs": self.input_digests,
                          "options": self.options}, sort_keys=True)
        self.run_id = f"{command}-{hashlib.sha256(key.encode()).hexdigest()[:12]}"
        self.artifacts: dict[str, Path] = {}
        self._t0 = time.perf_counter()
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, name: str, path: Path) -> Path:
        self.artifacts[name] = path
        return path

    def finish(self) -> Path:
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "options": self.options,
            "config_hash": self.cfg.digest(),
            "source_revision": source_revision(),
            "inputs": {k: {"path": str(p), "sha256": self.input_digests[k]} for k, p in self.inputs.items()},
            "artifacts": {k: {"path": _rel(p, self.out), "sha256": sha256_file(p)}
                          for k, p in sorted(self.artifacts.items())},
            # the only field that differs between otherwise identical runs
            "duration_seconds": round(time.perf_counter() - self._t0, 3),
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        log.info("%s done: %s", self.run_id, self.out)
        return path


def _digest_input(p: Path) -> str:
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(p.glob("*.jsonl")) + sorted(p.glob("world.json")):
            h.update(f.name.encode())
            h.update(sha256_file(f).encode())
        return h.hexdigest()
    if not p.is_file():
        raise MissingArtifactError(f"input not found: {p}")
    return sha256_file(p)


def _rel(p: Path, root: Path) -> str:
    try:
        return p.relative_to(root).as_posix()
    except ValueError:
        return str(p)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[dict], run_id: str | None = None) -> Path:
    """Append rows under a header.  Rows already present for ``run_id`` are replaced, so a rerun is idempotent."""
    kept: list[list[str]] = []
    if path.exists():
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            old_header = next(reader, None)
            if old_header is not None and list(old_header) != list(header):
                raise ConfigError(f"{path} has a different header; refusing to append")
            kept = [r for r in reader if run_id is None or "run_id" not in header or r[header.index("run_id")] != run_id]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(kept)
        for row in rows:
            w.writerow([_fmt(row.get(k, "")) for k in header])
    return path


# -----------------------------------------------------------------------------
# config and inputs
# -----------------------------------------------------------------------------


def resolve_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    d: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise MissingArtifactError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a flat JSON object")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        d[key.strip()] = ex.coerce_value(key.strip(), raw.strip())
    if args.seed is not None:
        d["seed"] = args.seed
    return ex.ExperimentConfig.from_dict(d)


def with_world_of(cfg: ex.ExperimentConfig, data: Path) -> ex.ExperimentConfig:
    """The dataset defines the world: copy its settings (not its seed) into the config."""
    path = data / "world.json"
    if not path.is_file():
        raise MissingArtifactError(f"dataset world file not found: {path}")
    world = load_world_config(path).to_dict()
    world.pop("seed")
    return cfg.replace(**world)


def load_records(data: Path, splits: Sequence[str] = SPLITS) -> list[GroupRecord]:
    out: list[GroupRecord] = []
    for split in splits:
        path = data / f"{split}.jsonl"
        if not path.is_file():
            raise MissingArtifactError(f"dataset split not found: {path}")
        out.extend(read_jsonl(path))
    return out


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------


def save_reward_model(path: Path, rm: RewardModel) -> Path:
    arrays = prefixed("reward/backbone", rm.backbone.state())
    arrays.update(prefixed("reward/plugin", rm.plugin_state()))
    arrays["reward/meta/wiring"] = np.array(float(WIRING_MODES.index(rm.wiring)))
    save_checkpoint(path, arrays)
    return path


def load_reward_model(path: Path, cfg: ex.ExperimentConfig) -> RewardModel:
    arrays = load_checkpoint(path)
    if "reward/meta/wiring" not in arrays:
        raise ConfigError(f"{path} is not a reward-model checkpoint")
    wiring = WIRING_MODES[int(arrays["reward/meta/wiring"])]
    rm = ex.new_reward_model(cfg, wiring)
    rm.backbone.load_state(strip_prefix("reward/backbone", arrays))
    rm.load_plugin_state(strip_prefix("reward/plugin", arrays))
    rm.freeze_backbone()
    return rm


def load_backbone_state(path: Path) -> dict:
    state = strip_prefix("reward/backbone", load_checkpoint(path))
    if not state:
        raise ConfigError(f"{path} holds no reward/backbone entries")
    return state


def save_diffusion(path: Path, model: DiffusionModel) -> Path:
    arrays = prefixed("diffusion/backbone", model.backbone.state())
    if model.branch is not None:
        arrays.update(prefixed("diffusion/branch", model.branch.state()))
    arrays["diffusion/meta/data_scale"] = np.array(model.data_scale)
    arrays["diffusion/meta/widths"] = np.array(model.backbone.geo.widths, dtype=np.float64)
    save_checkpoint(path, arrays)
    return path


def load_diffusion(path: Path, cfg: ex.ExperimentConfig) -> DiffusionModel:
    arrays = load_checkpoint(path)
    if "diffusion/meta/data_scale" not in arrays:
        raise ConfigError(f"{path} is not a diffusion checkpoint")
    widths = tuple(int(w) for w in arrays["diffusion/meta/widths"])
    if widths != tuple(cfg.unet_widths):
        raise ConfigError(f"{path} was trained with unet_widths={widths}, config has {cfg.unet_widths}")
    branch = strip_prefix("diffusion/branch", arrays)
    model = DiffusionModel.create(np.random.default_rng(0), cfg.unet_geometry(),
                                  cfg.cardinalities if branch else None,
                                  data_scale=float(arrays["diffusion/meta/data_scale"]))
    model.backbone.load_state(strip_prefix("diffusion/backbone", arrays))
    if branch:
        model.branch.load_state(branch)
    model.set_trainable(False)
    return model


# -----------------------------------------------------------------------------
# commands
# -----------------------------------------------------------------------------


def cmd_gen_data(cfg: ex.ExperimentConfig, out: Path, args=None) -> Run:
    run = Run("gen-data", cfg, out, {})
    paths = emit_dataset(generate_world(cfg.world_config()), out)
    for name, p in paths.items():
        run.add(name, p)
    run.finish()
    return run


def cmd_pretrain_backbone(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    data = Path(args.data)
    cfg = with_world_of(cfg, data)
    run = Run("pretrain-backbone", cfg, out, {"data": data})
    pre = load_records(data, ("pretrain",))
    rm = ex.new_reward_model(cfg)
    curve = pretrain_backbone(pre, rm, cfg.rm_train_config(cfg.rm_pretrain_epochs), log.info)
    run.add("checkpoint", save_reward_model(run.path("backbone.ckpt"), rm))
    run.add("curve", write_csv(run.path("pretrain_loss.csv"), ("epoch", "mean_loss"),
                               [{"epoch": i, "mean_loss": v} for i, v in enumerate(curve)]))
    run.finish()
    return run


def _backbone_for(cfg: ex.ExperimentConfig, data: Path, args) -> tuple[dict, dict[str, Path]]:
    if args.backbone:
        path = Path(args.backbone)
        if not path.is_file():
            raise MissingArtifactError(f"backbone checkpoint not found: {path}")
        return load_backbone_state(path), {"backbone": path}
    if not args.pretrain_backbone:
        raise ConfigError("train-rm needs --backbone PATH or --pretrain-backbone")
    return ex.pretrained_backbone_state(cfg, load_records(data, ("pretrain",))), {}


def cmd_train_rm(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    data = Path(args.data)
    cfg = with_world_of(cfg, data)
    state, extra = _backbone_for(cfg, data, args)
    run = Run("train-rm", cfg, out, {"data": data, **extra}, {"pretrain_backbone": not extra})
    train = load_records(data, ("train",))
    rm, curve = ex.fit_reward_model(cfg, state, train, log_fn=log.info)
    run.add("checkpoint", save_reward_model(run.path("rm.ckpt"), rm))
    run.add("curve", write_csv(run.path("rm_train_loss.csv"), ("epoch", "mean_loss"),
                               [{"epoch": i, "mean_loss": v} for i, v in enumerate(curve)]))
    run.finish()
    return run


def cmd_eval_rm(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    data = Path(args.data)
    cfg = with_world_of(cfg, data)
    ckpt = Path(args.rm)
    if not ckpt.is_file():
        raise MissingArtifactError(f"reward-model checkpoint not found: {ckpt}")
    run = Run("eval-rm", cfg, out, {"data": data, "rm": ckpt},
              {"no_plugins": bool(args.no_plugins), "splits": list(args.splits)})
    rm = load_reward_model(ckpt, cfg)
    variant = "backbone" if args.no_plugins else rm.wiring
    rows = []
    for split in args.splits:
        recs = load_records(data, (split,))
        r = ex.evaluate_reward_model(rm, recs, split, variant, personalize=not args.no_plugins)
        rows.append({"run_id": run.run_id, "split": split, "variant": variant, "map": r.map, "gauc": r.gauc,
                     "n_groups": r.n_groups, "n_skipped": r.n_skipped})
        log.info("%s %s: MAP %.4f GAUC %.4f", variant, split, r.map, r.gauc)
    run.add("metrics", write_csv(run.path(args.metrics_name), RM_EVAL_CSV, rows, run.run_id))
    run.finish()
    return run


def _reference_for(cfg: ex.ExperimentConfig, args) -> tuple[DiffusionModel | None, dict[str, Path]]:
    if args.reference:
        path = Path(args.reference)
        if not path.is_file():
            raise MissingArtifactError(f"reference checkpoint not found: {path}")
        ref = load_diffusion(path, cfg)
        if ref.branch is not None:
            raise ConfigError(f"{path} has a personalized branch; the reference must be a plain denoiser")
        return ref, {"reference": path}
    if cfg.mode != "sft":
        raise ConfigError(f"mode {cfg.mode} needs a reference checkpoint (--reference PATH)")
    return None, {}


def cmd_train_diffusion(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    """Without ``--reference`` (sft only): fit the plain reference denoiser on every training candidate.

    With ``--reference``: fine-tune in ``mode`` with or without the personalized branch.
    """
    data = Path(args.data)
    cfg = with_world_of(cfg, data)
    ref, extra = _reference_for(cfg, args)
    run = Run("train-diffusion", cfg, out, {"data": data, **extra})
    train = load_records(data, ("train",))
    if ref is None:
        model, curve = ex.pretrain_diffusion(cfg, train, log.info)
        rows = [{"step": i + 1, "mean_loss": v, "mean_s_pos": "", "mean_s_neg": ""} for i, v in enumerate(curve)]
        header = TRAIN_CSV
    else:
        result = ex.train_diffusion(cfg, ref, train, log_fn=log.info)
        model, rows = result.model, result.rows
        header = TRAIN_CSV + (("phase",) if any("phase" in r for r in rows) else ())
        rows = [{k: ("" if isinstance(v, float) and np.isnan(v) else v) for k, v in r.items()} for r in rows]
    run.add("checkpoint", save_diffusion(run.path("diffusion.ckpt"), model))
    run.add("curve", write_csv(run.path("train_loss.csv"), header, rows))
    run.finish()
    return run


def cmd_sample(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    data = Path(args.data)
    cfg = with_world_of(cfg, data)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise MissingArtifactError(f"diffusion checkpoint not found: {ckpt}")
    run = Run("sample", cfg, out, {"data": data, "checkpoint": ckpt})
    model = load_diffusion(ckpt, cfg)
    records = load_records(data)
    conditions = {int(r.prompt_id): r.condition for r in records}
    features = {int(r.user_id): r.features for r in records}
    items = ex.generate_items(cfg, model, ex.eval_pairs(cfg, records), conditions, features)
    path = run.path("samples.jsonl")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in items:
            fh.write(json.dumps({"run_id": run.run_id, "user_id": g.user_id, "prompt_id": g.prompt_id,
                                 "seed": g.seed, "item": [float(v) for v in g.item]}) + "\n")
    run.add("samples", path)
    run.finish()
    return run


def read_samples(path: Path) -> list[ex.GeneratedItem]:
    if not path.is_file():
        raise MissingArtifactError(f"samples file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(ex.GeneratedItem(d["user_id"], d["prompt_id"], d["seed"], np.asarray(d["item"])))
    return out


def _parse_named(specs: Sequence[str]) -> dict[str, Path]:
    named: dict[str, Path] = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name:
            raise ConfigError(f"--samples expects NAME=PATH, got {spec!r}")
        if name in named:
            raise ConfigError(f"variant {name!r} given twice")
        named[name] = Path(path)
    return named


def cmd_eval_gen(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    data = Path(args.data)
    cfg = with_world_of(cfg, data)
    named = _parse_named(args.samples)
    inputs = {f"samples:{k}": p for k, p in named.items()}
    rm = None
    if args.rm:
        inputs["rm"] = Path(args.rm)
    run = Run("eval-gen", cfg, out, {"data": data, **inputs}, {"variants": list(named)})
    if args.rm:
        rm = load_reward_model(Path(args.rm), cfg)
    records = load_records(data)
    conditions = {int(r.prompt_id): r.condition for r in records}
    features = {int(r.user_id): r.features for r in records}
    world = generate_world(load_world_config(data / "world.json"))  # oracle access: scoring only
    rows, per_pair = [], {"oracle": {}, "rm": {}}
    for name, path in named.items():
        items = read_samples(path)
        o = ex.oracle_scores(world, items)
        per_pair["oracle"][name] = ex.per_pair_means(items, o)
        row = {"run_id": run.run_id, "variant": name, "n_samples": len(items), "oracle_mean": float(o.mean()),
               "rm_mean": ""}
        if rm is not None:
            s = ex.reward_scores(rm, conditions, features, items)
            per_pair["rm"][name] = ex.per_pair_means(items, s)
            row["rm_mean"] = float(s.mean())
        rows.append(row)
        log.info("%s: oracle %.4f rm %s", name, row["oracle_mean"], row["rm_mean"])
    wins = []
    for metric, table in per_pair.items():
        for a in table:
            for b in table:
                if a != b:
                    shared = len(set(table[a]) & set(table[b]))
                    wins.append({"run_id": run.run_id, "metric": metric, "variant_a": a, "variant_b": b,
                                 "win_rate": ex.paired_win_rate(table[a], table[b]), "n_pairs": shared})
    run.add("metrics", write_csv(run.path("gen_eval.csv"), GEN_EVAL_CSV, rows, run.run_id))
    run.add("win_rates", write_csv(run.path("win_rates.csv"), WIN_CSV, wins, run.run_id))
    run.finish()
    return run


# -----------------------------------------------------------------------------
# sweeps
# -----------------------------------------------------------------------------


def _ns(**kw) -> argparse.Namespace:
    base = dict(backbone=None, pretrain_backbone=False, no_plugins=False, splits=["valid", "test"],
                metrics_name="rm_eval.csv", reference=None, rm=None, samples=[])
    base.update(kw)
    return argparse.Namespace(**base)


def sweep_prm(cfg: ex.ExperimentConfig, out: Path) -> list[dict]:
    """All four plug-in wirings plus the frozen-backbone baseline on one world."""
    data = out / "data"
    cmd_gen_data(cfg, data)
    bb = cmd_pretrain_backbone(cfg, out / "backbone", _ns(data=data))
    backbone_ckpt = bb.artifacts["checkpoint"]
    rows = []
    base_eval = cmd_eval_rm(cfg, out / "eval-backbone", _ns(data=data, rm=backbone_ckpt, no_plugins=True))
    rows += _read_rows(base_eval.artifacts["metrics"])
    for wiring in WIRING_MODES:
        wcfg = cfg.replace(rm_wiring=wiring)
        tr = cmd_train_rm(wcfg, out / f"rm-{wiring}", _ns(data=data, backbone=backbone_ckpt))
        ev = cmd_eval_rm(wcfg, out / f"eval-{wiring}", _ns(data=data, rm=tr.artifacts["checkpoint"]))
        rows += _read_rows(ev.artifacts["metrics"])
    return rows


def sweep_pf(cfg: ex.ExperimentConfig, out: Path) -> list[dict]:
    """Reference denoiser, the four generation variants, a reward model, and a joint evaluation."""
    data = out / "data"
    cmd_gen_data(cfg, data)
    base = cmd_train_diffusion(cfg.replace(mode="sft"), out / "diffusion-base", _ns(data=data))
    ref = base.artifacts["checkpoint"]
    samples = {"base": cmd_sample(cfg, out / "samples-base", _ns(data=data, checkpoint=ref)).artifacts["samples"]}
    for name, (mode, pers) in ex.VARIANTS.items():
        vcfg = cfg.replace(mode=mode, personalization=pers)
        tr = cmd_train_diffusion(vcfg, out / f"diffusion-{name}", _ns(data=data, reference=ref))
        sm = cmd_sample(vcfg, out / f"samples-{name}", _ns(data=data, checkpoint=tr.artifacts["checkpoint"]))
        samples[name] = sm.artifacts["samples"]
    rm = cmd_train_rm(cfg, out / "rm", _ns(data=data, pretrain_backbone=True))
    ev = cmd_eval_gen(cfg, out / "eval-gen", _ns(data=data, rm=rm.artifacts["checkpoint"],
                                                  samples=[f"{k}={v}" for k, v in samples.items()]))
    return _read_rows(ev.artifacts["metrics"])


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _sweep_one(preset: str, cfg_dict: dict, out: str) -> list[dict]:
    cfg = ex.ExperimentConfig.from_dict(cfg_dict)
    fn = sweep_prm if preset == "prm-ablation" else sweep_pf
    rows = fn(cfg, Path(out))
    return [{"seed": cfg.seed, **r} for r in rows]


def cmd_sweep(cfg: ex.ExperimentConfig, out: Path, args) -> Run:
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    run = Run(f"sweep-{args.preset}", cfg, out, {}, {"seeds": seeds})
    jobs = [(args.preset, cfg.replace(seed=s).to_dict(), str(out / f"seed-{s}")) for s in seeds]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_sweep_one, *zip(*jobs)))
    else:
        results = [_sweep_one(*job) for job in jobs]
    rows = [r for batch in results for r in batch]
    header = ("seed",) + (RM_EVAL_CSV if args.preset == "prm-ablation" else GEN_EVAL_CSV)
    run.add("summary", write_csv(run.path("summary.csv"), header, rows))
    run.finish()
    return run


# -----------------------------------------------------------------------------
# entry point
# -----------------------------------------------------------------------------

COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "pretrain-backbone": cmd_pretrain_backbone,
    "train-rm": cmd_train_rm,
    "eval-rm": cmd_eval_rm,
    "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample,
    "eval-gen": cmd_eval_gen,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat JSON config; flags below override it")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", required=True, help="output directory for this run")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="perfusion", description="Personalized group preference alignment, toy scale.")
    p.add_argument("--version", action="version", version=f"perfusion {perfusion.__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate the synthetic world and its splits")

    s = sub.add_parser("pretrain-backbone", parents=[common], help="pretrain the frozen reward towers")
    s.add_argument("--data", required=True, metavar="DIR")

    s = sub.add_parser("train-rm", parents=[common], help="train personalized plug-ins on a frozen backbone")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--backbone", metavar="PATH", help="checkpoint from pretrain-backbone")
    s.add_argument("--pretrain-backbone", action="store_true", help="pretrain the backbone in this run instead")

    s = sub.add_parser("eval-rm", parents=[common], help="MAP/GAUC of a reward model")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--rm", required=True, metavar="PATH")
    s.add_argument("--no-plugins", action="store_true", help="score with the frozen backbone only")
    s.add_argument("--splits", nargs="+", default=["valid", "test"], choices=SPLITS)
    s.add_argument("--metrics-name", default="rm_eval.csv", help=argparse.SUPPRESS)

    s = sub.add_parser("train-diffusion", parents=[common], help="reference SFT, or a fine-tuning variant")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--reference", metavar="PATH", help="frozen reference checkpoint (required for DPO modes)")

    s = sub.add_parser("sample", parents=[common], help="sample items for evaluation (user, prompt) pairs")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--checkpoint", required=True, metavar="PATH")

    s = sub.add_parser("eval-gen", parents=[common], help="oracle and reward-model scores of samples")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--samples", nargs="+", required=True, metavar="NAME=PATH")
    s.add_argument("--rm", metavar="PATH", help="reward-model checkpoint for the learned metric")

    s = sub.add_parser("sweep", parents=[common], help="run an ablation preset")
    s.add_argument("preset", choices=PRESETS)
    s.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    s.add_argument("--parallel", type=int, default=1, help="run seeds in this many processes")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, Path(args.out), args)
    except ConfigError as exc:
        print(f"perfusion: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"perfusion: missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"perfusion: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PerfusionError as exc:
        print(f"perfusion: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
