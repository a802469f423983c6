import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfusion.errors import DegenerateInputError, DimensionError
from perfusion.numerics import AdamW, Tensor
from perfusion.numerics.gradcheck import check_gradients
from perfusion.reward import (
    RewardGeometry,
    RewardModel,
    RMTrainConfig,
    average_precision,
    batch_arrays,
    gauc_metric,
    group_auc,
    ideal_distribution,
    map_metric,
    mean_loss,
    predicted_distribution,
    rm_group_loss,
    score,
    tokenize_condition,
    tower_forward,
    train_rm,
)
from perfusion.synthdata import GroupRecord

CARDS = (3, 4)
SMALL = RewardGeometry(width=8, n_layers=1, n_heads=2, ffn_width=8, out_dim=8, n_chunks=2, item_dim=4, cond_dim=3,
                       embed_dim=4, cross_layers=1)


def model(wiring="duplicated", seed=0, geo=SMALL):
    return RewardModel(np.random.default_rng(seed), CARDS, geo, wiring)


def perturb_plugins(rm, seed=1, scale=0.3):
    rng = np.random.default_rng(seed)
    for p in rm.plugin_parameters():
        p.data[:] = rng.normal(scale=scale, size=p.shape)


def random_batch(rng, b=3, n=4, geo=SMALL):
    cond = rng.normal(size=(b, geo.cond_dim))
    items = rng.normal(size=(b, n, geo.item_dim))
    feats = np.stack([rng.integers(0, c, size=b) for c in CARDS], axis=1)
    return cond, items, feats


def random_records(rng, count, n=4, geo=SMALL, k=1):
    out = []
    for i in range(count):
        labels = np.zeros(n, dtype=np.int64)
        labels[rng.choice(n, size=k, replace=False)] = 1
        out.append(GroupRecord(user_id=i % 5, features=[int(rng.integers(c)) for c in CARDS], prompt_id=i,
                               condition=rng.normal(size=geo.cond_dim), items=rng.normal(size=(n, geo.item_dim)),
                               labels=labels))
    return out


# -- distributions and loss ---------------------------------------------------


def test_ideal_distribution_anchors():
    np.testing.assert_array_equal(ideal_distribution([1, 1, 0, 0, 0]), [0.5, 0.5, 0, 0, 0])
    np.testing.assert_array_equal(ideal_distribution([1, 0, 0]), [1, 0, 0])
    np.testing.assert_allclose(ideal_distribution([1, 1, 1]), [1 / 3] * 3, rtol=0, atol=1e-16)
    with pytest.raises(DegenerateInputError):
        ideal_distribution([0, 0, 0])


@given(st.lists(st.integers(0, 1), min_size=2, max_size=8).filter(any), st.randoms(use_true_random=False))
def test_ideal_distribution_commutes_with_permutation(labels, rnd):
    perm = list(range(len(labels)))
    rnd.shuffle(perm)
    p = ideal_distribution(labels)
    np.testing.assert_array_equal(ideal_distribution([labels[i] for i in perm]), p[perm])
    assert p.sum() == pytest.approx(1.0, abs=1e-15)


def test_predicted_distribution_anchors():
    np.testing.assert_allclose(predicted_distribution(np.zeros(5)).data, 0.2, atol=1e-16)
    got = predicted_distribution(np.log([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(got, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-15)


@settings(max_examples=200)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=10), st.floats(-100, 100))
def test_predicted_distribution_sums_to_one_and_is_shift_invariant(scores, c):
    p = predicted_distribution(np.array(scores)).data
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(predicted_distribution(np.array(scores) + c).data, p, rtol=0, atol=1e-12)


def test_rm_group_loss_hand_anchor():
    mpmath.mp.dps = 40
    third = mpmath.mpf(1) / 3
    want = -(0.5 * mpmath.log(third) + 0.5 * mpmath.log(1 - third)) * 2 - mpmath.log(1 - third)
    got = rm_group_loss([0.5, 0.5, 0.0], np.full(3, 1 / 3)).item()
    assert got == pytest.approx(float(want), abs=1e-9)
    assert got == pytest.approx(1.9095425048844386, abs=1e-9)


def test_rm_group_loss_clamped_perfect_match_and_errors():
    got = rm_group_loss([1.0, 0.0], [1.0, 0.0]).item()
    assert got == pytest.approx(-2 * math.log1p(-1e-12), abs=1e-15)
    assert got < 1e-11
    with pytest.raises(DimensionError):
        rm_group_loss([1.0, 0.0], [0.5, 0.3, 0.2])


def test_rm_group_loss_permutation_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = ideal_distribution(rng.integers(0, 2, size=5) | np.eye(5, dtype=int)[0])
        ph = rng.dirichlet(np.ones(5))
        perm = rng.permutation(5)
        assert rm_group_loss(p[perm], ph[perm]).item() == pytest.approx(rm_group_loss(p, ph).item(), abs=1e-13)


def test_rm_group_loss_minimized_at_match_by_grid_search():
    grid = np.linspace(0.01, 0.98, 98)
    for p in ([0.2, 0.3, 0.5], [0.6, 0.3, 0.1], [1 / 3] * 3):
        at_p = rm_group_loss(p, p).item()
        for a, b in itertools.product(grid, grid):
            if a + b < 0.995:
                assert rm_group_loss(p, [a, b, 1 - a - b]).item() >= at_p - 1e-12


def test_rm_group_loss_batch_is_mean_of_groups():
    rng = np.random.default_rng(1)
    p = np.stack([ideal_distribution([1, 0, 1]), ideal_distribution([0, 1, 0])])
    ph = rng.dirichlet(np.ones(3), size=2)
    both = rm_group_loss(p, ph).item()
    assert both == pytest.approx((rm_group_loss(p[0], ph[0]).item() + rm_group_loss(p[1], ph[1]).item()) / 2, abs=1e-14)


# -- towers and plug-ins -------------------------------------------------------


def test_fresh_plugins_are_bitwise_identity_for_every_wiring():
    rng = np.random.default_rng(2)
    for wiring in ("duplicated", "shared", "vision_only", "text_only"):
        rm = model(wiring)
        for _ in range(10):
            cond, items, feats = random_batch(rng)
            plain = rm.group_scores(cond, items, None).data
            assert np.array_equal(plain, rm.group_scores(cond, items, feats).data)
            assert np.array_equal(plain, rm.group_scores(cond, items, feats, personalize=False).data)


def test_wiring_parameter_sharing():
    dup, shared = model("duplicated"), model("shared")
    assert dup.text_plugin is not dup.item_plugin
    ids_t = {id(p) for p in dup.text_plugin.parameters()}
    assert ids_t.isdisjoint(id(p) for p in dup.item_plugin.parameters())
    assert shared.text_plugin is shared.item_plugin
    assert len(shared.plugin_parameters()) == len(dup.plugin_parameters()) // 2
    assert model("vision_only").text_plugin is None and model("text_only").item_plugin is None
    with pytest.raises(ValueError):
        model("both")


@pytest.mark.parametrize("wiring,side", [("vision_only", "text"), ("text_only", "item")])
def test_unplugged_tower_ignores_user(wiring, side):
    rm = model(wiring)
    perturb_plugins(rm)
    rng = np.random.default_rng(3)
    cond, items, _ = random_batch(rng, b=1)
    tower = rm.backbone.text if side == "text" else rm.backbone.item
    x = tokenize_condition(cond, SMALL.vocab) if side == "text" else items[0]
    plugin = rm.text_plugin if side == "text" else rm.item_plugin
    assert plugin is None
    ref = tower_forward(x, None, tower, None).data
    # the other tower does see u
    other = rm.item_plugin if side == "text" else rm.text_plugin
    other_tower = rm.backbone.item if side == "text" else rm.backbone.text
    ox = items[0] if side == "text" else tokenize_condition(cond, SMALL.vocab)
    outs = []
    for f in ([0, 0], [2, 3]):
        feats = np.repeat(np.asarray([f]), len(ox), axis=0)
        assert np.array_equal(tower_forward(x, None, tower, None).data, ref)
        outs.append(tower_forward(ox, feats, other_tower, other).data)
    assert not np.array_equal(outs[0], outs[1])


def test_constant_attention_injection_shifts_every_coordinate():
    rm = model()
    tower = rm.backbone.text
    tokens = tokenize_condition(np.random.default_rng(4).normal(size=(2, SMALL.cond_dim)), SMALL.vocab)
    base, shifted = [], []
    tower(tokens, None, base)
    c = 0.75
    inj = [(Tensor(np.full((2, SMALL.width), c)), None)]
    tower(tokens, inj, shifted)
    pre_b = next(h for kind, l, h in base if kind == "pre_attn" and l == 0)
    pre_s = next(h for kind, l, h in shifted if kind == "pre_attn" and l == 0)
    np.testing.assert_allclose(pre_s - pre_b, c, rtol=0, atol=1e-14)


def test_tower_forward_errors():
    rm = model()
    with pytest.raises(DegenerateInputError):
        rm.backbone.text(np.zeros((1, 0), dtype=int))
    with pytest.raises(ValueError):
        tower_forward(np.zeros((1, 3), dtype=int), None, rm.backbone.text, rm.text_plugin)


def test_score_is_cosine_and_user_dependent():
    rm = model()
    rng = np.random.default_rng(5)
    cond, item = rng.normal(size=SMALL.cond_dim), rng.normal(size=SMALL.item_dim)
    s0 = score(cond, item, [0, 0], rm)
    assert -1.0 <= s0 <= 1.0
    vt = rm.backbone.text(tokenize_condition(cond[None], SMALL.vocab)).data[0]
    vi = rm.backbone.item(item[None]).data[0]
    assert s0 == pytest.approx(vt @ vi / np.linalg.norm(vt) / np.linalg.norm(vi), abs=1e-12)
    perturb_plugins(rm)
    assert score(cond, item, [0, 0], rm) != score(cond, item, [2, 3], rm)


def test_score_is_one_when_towers_agree():
    rm = model()
    rng = np.random.default_rng(6)
    cond, item = rng.normal(size=SMALL.cond_dim), rng.normal(size=SMALL.item_dim)
    vt = rm.backbone.text(tokenize_condition(cond[None], SMALL.vocab)).data[0]
    rm.backbone.item.pool.weight.data[:] = 0.0
    rm.backbone.item.pool.bias.data[:] = 3.0 * vt  # item pooled vector := 3 * text pooled vector
    assert score(cond, item, None, rm) == pytest.approx(1.0, abs=1e-12)


def test_rm_loss_gradients():
    rm = model(geo=SMALL)
    perturb_plugins(rm, scale=0.2)
    rng = np.random.default_rng(7)
    b = batch_arrays(random_records(rng, 3, k=2))

    def loss():
        s = rm.group_scores(b["conditions"], b["items"], b["features"])
        return rm_group_loss(ideal_distribution(b["labels"]), predicted_distribution(s))

    params = rm.plugin_parameters() + rm.backbone.parameters()
    assert check_gradients(loss, params, max_entries=4, rng=np.random.default_rng(0)) < 1e-4


# -- training ---------------------------------------------------------------------


def test_train_rm_only_moves_plugins():
    rm = model()
    rng = np.random.default_rng(8)
    recs = random_records(rng, 24)
    before = rm.backbone.state()
    curve = train_rm(recs, rm, RMTrainConfig(epochs=3, batch_size=8, warmup_steps=0))
    assert len(curve) == 4
    assert all(np.array_equal(v, before[k]) for k, v in rm.backbone.state().items())
    assert any(np.abs(p.data).max() > 0 for p in rm.item_plugin.attn[0].parameters())


def test_train_rm_zero_epochs_and_empty_data():
    rm = model()
    rng = np.random.default_rng(9)
    recs = random_records(rng, 6)
    state = rm.state()
    curve = train_rm(recs, rm, RMTrainConfig(epochs=0))
    assert curve == [mean_loss(rm, recs)]
    assert all(np.array_equal(v, state[k]) for k, v in rm.state().items())
    with pytest.raises(DegenerateInputError):
        train_rm([], rm, RMTrainConfig(epochs=1))


def test_train_rm_fits_a_planted_user_signal():
    # the positive is the candidate whose first coordinate matches the user's sign
    rng = np.random.default_rng(10)
    recs = []
    for i in range(64):
        f0 = int(rng.integers(2))
        items = rng.normal(size=(4, SMALL.item_dim))
        items[:, 0] = np.abs(items[:, 0]) * np.array([1, 1, -1, -1])
        pos = 0 if f0 else 2
        labels = np.eye(4, dtype=np.int64)[pos]
        recs.append(GroupRecord(i, [f0, 0], 0, np.ones(SMALL.cond_dim), items, labels))
    rm = model(seed=11)
    curve = train_rm(recs, rm, RMTrainConfig(epochs=10, batch_size=16, lr=3e-2, warmup_steps=0))
    assert curve[-1] < curve[0]


# -- metrics ------------------------------------------------------------------------


def brute_ap(labels, scores):
    idx = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for rank, i in enumerate(idx, 1):
        if labels[i]:
            hits += 1
            total += hits / rank
    return total / hits


def brute_auc(labels, scores):
    pairs = [(p, n) for p in range(len(labels)) for n in range(len(labels)) if labels[p] and not labels[n]]
    return sum(1.0 if scores[p] > scores[n] else 0.5 if scores[p] == scores[n] else 0.0 for p, n in pairs) / len(pairs)


def test_metric_hand_example():
    labels, scores = [1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]
    assert average_precision(labels, scores) == pytest.approx(5 / 6, abs=1e-12)
    assert group_auc(labels, scores) == pytest.approx(0.75, abs=1e-12)


def test_metric_trivial_cases():
    assert average_precision([1, 1, 0], [3, 2, 1]) == 1.0 and group_auc([1, 1, 0], [3, 2, 1]) == 1.0
    assert group_auc([1, 0, 0], [1, 1, 1]) == 0.5
    # ties in AP go to the lower index
    assert average_precision([0, 1], [1.0, 1.0]) == 0.5
    assert average_precision([1, 0], [1.0, 1.0]) == 1.0


def test_metrics_match_brute_force_and_skip_degenerate_groups():
    rng = np.random.default_rng(12)
    recs = random_records(rng, 40, n=6, k=2)
    recs[3].labels[:] = 1
    recs[7].labels[:] = 0
    scores = [np.round(rng.normal(size=6), 1) for _ in recs]
    g = gauc_metric(recs, scores)
    m = map_metric(recs, scores)
    assert g.n_skipped == 2 and g.n_groups == 38
    assert m.n_skipped == 1 and m.n_groups == 39
    keep = [i for i in range(40) if i not in (3, 7)]
    assert g.value == pytest.approx(np.mean([brute_auc(recs[i].labels, scores[i]) for i in keep]), abs=1e-12)
    keep_m = [i for i in range(40) if i != 7]
    assert m.value == pytest.approx(np.mean([brute_ap(recs[i].labels, scores[i]) for i in keep_m]), abs=1e-12)


def test_metrics_invariant_under_increasing_transforms():
    rng = np.random.default_rng(13)
    recs = random_records(rng, 100, n=5, k=2)
    scores = [rng.normal(size=5) for _ in recs]
    base = (map_metric(recs, scores).value, gauc_metric(recs, scores).value)
    for f in (np.exp, lambda s: 3 * s - 7, lambda s: s ** 3, np.arctan):
        t = [f(s) for s in scores]
        assert map_metric(recs, t).value == pytest.approx(base[0], abs=1e-12)
        assert gauc_metric(recs, t).value == pytest.approx(base[1], abs=1e-12)


def test_metrics_accept_callable_scorer():
    rng = np.random.default_rng(14)
    recs = random_records(rng, 10)
    oracle = lambda r: r.labels.astype(float)  # noqa: E731
    assert map_metric(recs, oracle).value == 1.0
    assert gauc_metric(recs, oracle).value == 1.0
