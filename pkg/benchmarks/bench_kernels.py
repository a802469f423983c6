"""Compare the compiled kernels with the numpy fallback.

Two views: each kernel on its own, and one end-to-end training step of the
diffusion model and of the reward model with every kernel switched together.

    python benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import copy
import timeit

import numpy as np

from perfusion.numerics import kernels
from perfusion.numerics import _pykernels


def micro(repeat: int) -> list[tuple[str, float, float]]:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 64))
    gamma, beta = np.ones(64), np.zeros(64)
    _, xhat, inv = _pykernels.layer_norm_forward(x, gamma, beta, 1e-5)
    cases = {
        "all_finite": lambda k: k.all_finite(x),
        "gelu_forward": lambda k: k.gelu_forward(x),
        "layer_norm_forward": lambda k: k.layer_norm_forward(x, gamma, beta, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(x, xhat, inv, gamma),
        "softmax_rows": lambda k: k.softmax_rows(x),
    }
    rows = []
    for name, fn in cases.items():
        py = min(timeit.repeat(lambda: fn(_pykernels), number=200, repeat=repeat)) / 200
        c = min(timeit.repeat(lambda: fn(kernels.compiled_backend), number=200, repeat=repeat)) / 200
        rows.append((name, py, c))
    return rows


def dpo_step_factory():
    from perfusion.diffusion import DiffusionModel
    from perfusion.experiments import ExperimentConfig
    from perfusion.groupdpo import DpoConfig, group_batch_data, train_group_dpo
    from perfusion.synthdata import generate_records, generate_world

    cfg = ExperimentConfig(seed=0, n_pretrain_records=0)
    records, _ = generate_records(generate_world(cfg.world_config()))
    train = [r for r in records if r.split == "train"]
    data = group_batch_data(train, {r.user_id: r.features for r in train}, lambda r: r.condition)
    base = DiffusionModel.create(np.random.default_rng(0), cfg.unet_geometry(), data_scale=5.0)
    base.set_trainable(False)
    model = copy.deepcopy(base)
    model.add_branch(np.random.default_rng(1), cfg.cardinalities)
    dc = DpoConfig(beta=0.3, steps=20, batch_size=64, learning_rate=1e-3)
    return lambda: train_group_dpo(data, model, base, cfg.schedule(), dc), 20


def rm_step_factory():
    from perfusion.experiments import ExperimentConfig, new_reward_model
    from perfusion.numerics import AdamW
    from perfusion.reward import _batch_loss, batch_arrays
    from perfusion.synthdata import generate_records, generate_world

    cfg = ExperimentConfig(seed=0, n_pretrain_records=0)
    records, _ = generate_records(generate_world(cfg.world_config()))
    batch = batch_arrays([r for r in records if r.split == "train"][:32])
    rm = new_reward_model(cfg)
    opt = AdamW(rm.parameters(), lr=1e-3)

    def run():
        for _ in range(5):
            opt.zero_grad()
            _batch_loss(rm, batch, True).backward()
            opt.step()

    return run, 5


def end_to_end(repeat: int) -> list[tuple[str, float, float]]:
    rows = []
    for name, factory in (("group-DPO step (batch 64)", dpo_step_factory), ("reward-model step (batch 32)", rm_step_factory)):
        times = {}
        for backend in ("python", "compiled"):
            kernels.use(backend)
            fn, n = factory()
            fn()  # warm-up
            times[backend] = min(timeit.repeat(fn, number=1, repeat=repeat)) / n
        rows.append((name, times["python"], times["compiled"]))
    kernels.use("compiled")
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'case':34s} {'python':>12s} {'compiled':>12s} {'speed-up':>9s}")
    for name, py, c in micro(args.repeat) + end_to_end(args.repeat):
        print(f"{name:34s} {py * 1e6:10.1f}us {c * 1e6:10.1f}us {py / c:8.2f}x")


if __name__ == "__main__":
    main()
