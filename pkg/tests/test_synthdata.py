import json

import numpy as np
import pytest

from perfusion.errors import ConfigError
from perfusion.reward import gauc_metric, map_metric
from perfusion.synthdata import (
    OracleParams,
    WorldConfig,
    emit_dataset,
    generate_records,
    generate_world,
    load_split,
    load_world_config,
    make_candidates,
    make_group,
    oracle_score,
    read_jsonl,
    style_vectors,
    top_k_labels,
)

SMALL = WorldConfig(n_users=20, n_records=200, n_pretrain_records=20, n_prompts=10)


def small(**kw):
    return WorldConfig(**{**SMALL.to_dict(), **kw})


def oracle_scorer(world):
    return lambda r: oracle_score(r.items, r.condition, world.style_offsets[r.user_id], world.oracle)


@pytest.mark.parametrize("bad", [
    dict(k_positive=5), dict(k_positive=0), dict(cardinalities=(8, 0)), dict(cardinalities=()),
    dict(n_users=1), dict(oracle_noise=-1.0),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        small(**bad)


def test_config_round_trip_and_unknown_keys():
    cfg = small(seed=3)
    assert WorldConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        WorldConfig.from_dict({"n_users": 5, "colour": 1})


def test_world_is_deterministic_and_style_is_a_function_of_features():
    a, b = generate_world(small(seed=4)), generate_world(small(seed=4))
    assert np.array_equal(a.styles, b.styles) and np.array_equal(a.conditions, b.conditions)
    assert not np.array_equal(a.styles, generate_world(small(seed=5)).styles)
    feats = np.array([[1, 2, 3, 4], [1, 2, 3, 4]])
    s = style_vectors(feats, a.oracle)
    assert np.array_equal(s[0], s[1])
    assert np.std(a.styles, axis=0).min() > 0
    np.testing.assert_allclose(np.linalg.norm(a.conditions, axis=1), 1.0, atol=1e-14)


def hand_oracle(style_weight=1.0):
    return OracleParams(field_style=[np.eye(2)], prompt_render=np.eye(2), style_render=np.eye(2),
                        consistency_weight=1.0, style_weight=style_weight, noise=0.0)


def test_oracle_hand_built_two_candidates():
    orc = hand_oracle()
    c = np.array([1.0, 0.0])
    offset = np.array([0.0, 1.0])
    items = np.array([[1.0, 1.0], [1.0, -1.0]])  # same consistency, opposite style alignment
    s = oracle_score(items, c, offset, orc)
    np.testing.assert_allclose(s, [np.sqrt(0.5) + 1.0, np.sqrt(0.5) - 1.0], atol=1e-15)
    np.testing.assert_array_equal(top_k_labels(s, 1), [1, 0])


def test_oracle_without_style_ignores_user():
    orc = hand_oracle(style_weight=0.0)
    items = np.random.default_rng(0).normal(size=(6, 2))
    c = np.array([0.6, 0.8])
    assert np.array_equal(oracle_score(items, c, np.array([0.0, 1.0]), orc),
                          oracle_score(items, c, np.array([1.0, -3.0]), orc))


def test_rendered_style_item_beats_weaker_alignment():
    # offsets orthogonal to render(c) and of equal length keep the consistency term fixed
    w = generate_world(small(seed=1))
    c, off = w.conditions[0], w.style_offsets[0]
    r = w.render(c)
    r_hat = r / np.linalg.norm(r)

    def perp(v):
        v = v - (v @ r_hat) * r_hat
        return v / np.linalg.norm(v)

    own = perp(off)
    size = np.linalg.norm(off)
    rng = np.random.default_rng(0)
    rivals = [r + size * perp(a * own + (1 - a) * perp(rng.normal(size=off.shape))) for a in (0.2, 0.5, 0.8, 0.95)]
    s = oracle_score(np.vstack([r + size * own] + rivals), c, off, w.oracle)
    assert s[0] == s.max() and np.all(s[1:] < s[0])


def test_oracle_noise_requires_rng():
    orc = hand_oracle()
    orc.noise = 0.1
    with pytest.raises(ValueError):
        oracle_score(np.ones((2, 2)), np.array([1.0, 0.0]), np.array([0.0, 1.0]), orc)


def test_top_k_ties_go_to_lower_index():
    np.testing.assert_array_equal(top_k_labels(np.array([1.0, 2.0, 2.0, 2.0]), 2), [0, 1, 1, 0])


def test_records_are_self_consistent_with_exactly_k_positives():
    w = generate_world(small(seed=2))
    recs, pre = generate_records(w)
    assert len(recs) == 200 and len(pre) == 20
    for r in recs:
        assert r.labels.sum() == w.cfg.k_positive and r.items.shape == (5, 32)
        s = oracle_score(r.items, r.condition, w.style_offsets[r.user_id], w.oracle)
        assert np.array_equal(top_k_labels(s, w.cfg.k_positive), r.labels)
    assert gauc_metric(recs, oracle_scorer(w)).value == 1.0
    assert map_metric(recs, oracle_scorer(w)).value == 1.0
    assert all(r.labels.sum() == 2 and r.split == "pretrain" for r in pre)


def test_style_only_candidates_are_consistency_equal():
    w = generate_world(small(style_only=True, seed=3))
    r = w.render(w.conditions[2])
    items = make_candidates(w, 0, 2, np.random.default_rng(0))
    cos = items @ r / (np.linalg.norm(items, axis=1) * np.linalg.norm(r))
    np.testing.assert_allclose(cos, cos[0], rtol=0, atol=1e-12)


def test_style_only_labels_differ_across_users():
    w = generate_world(small(style_only=True, seed=4))
    rec = make_group(w, 0, 1, np.random.default_rng(0))
    differ = 0
    for other in range(1, w.cfg.n_users):
        s = oracle_score(rec.items, rec.condition, w.style_offsets[other], w.oracle)
        differ += not np.array_equal(top_k_labels(s, 2), rec.labels)
    assert differ >= (w.cfg.n_users - 1) // 2


def test_style_only_user_blind_scorer_is_at_chance():
    w = generate_world(WorldConfig(style_only=True, seed=0))
    recs, _ = generate_records(w)
    assert len(recs) >= 2000
    W = np.random.default_rng(5).normal(size=(w.cfg.cond_dim, w.cfg.item_dim))
    prompt_only = gauc_metric(recs, lambda r: r.items @ (r.condition @ W)).value
    mean_style = w.style_offsets.mean(axis=0)
    population = gauc_metric(recs, lambda r: (r.items - w.render(r.condition)) @ mean_style).value
    assert 0.45 <= prompt_only <= 0.55
    assert 0.45 <= population <= 0.55


def test_split_ratio_and_user_coverage():
    w = generate_world(small(n_users=50, n_records=1000, seed=6))
    recs, _ = generate_records(w)
    counts = {s: sum(r.split == s for r in recs) for s in ("train", "valid", "test")}
    assert counts == {"train": 800, "valid": 100, "test": 100}
    per_user = np.bincount([r.user_id for r in recs], minlength=50)
    assert per_user.min() >= 10
    assert {r.user_id for r in recs if r.split == "train"} == set(range(50))


def test_emit_dataset_is_byte_identical_and_round_trips(tmp_path):
    w = generate_world(small(seed=7))
    a = emit_dataset(w, tmp_path / "a")
    b = emit_dataset(generate_world(small(seed=7)), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes(), key
    assert load_world_config(a["world"]) == small(seed=7)
    train = load_split(tmp_path / "a", "train")
    recs, _ = generate_records(w)
    orig = [r for r in recs if r.split == "train"]
    assert len(train) == len(orig)
    assert np.array_equal(train[0].items, orig[0].items) and np.array_equal(train[0].labels, orig[0].labels)
    row = json.loads(a["test"].read_text().splitlines()[0])
    assert set(row) == {"user_id", "features", "prompt_id", "condition", "items", "labels", "split"}


def test_read_errors_name_the_path(tmp_path):
    with pytest.raises(OSError, match="missing.jsonl"):
        read_jsonl(tmp_path / "missing.jsonl")
