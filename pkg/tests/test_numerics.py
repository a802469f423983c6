import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from perfusion.errors import ContractError, DegenerateInputError, DimensionError, NumericalError
from perfusion.numerics import (
    AdamW,
    OptimizerState,
    Tensor,
    adamw_step,
    concat,
    cosine_similarity,
    elementwise,
    gelu,
    layer_norm,
    log_sigmoid,
    logsumexp,
    matmul,
    parameter,
    sigmoid,
    softmax,
    take,
    tsum,
)
from perfusion.numerics.checkpoint import load_checkpoint, save_checkpoint
from perfusion.numerics.gradcheck import check_gradients


def test_matmul_identity():
    b = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_product():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_grad_is_ones_times_bT():
    rng = np.random.default_rng(1)
    a = parameter(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    tsum(matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-14)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_elementwise_anchors():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert gelu(Tensor(0.0)).item() == 0.0
    x = parameter(0.0)
    sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25, abs=1e-15)


def test_elementwise_dispatch_and_bad_broadcast():
    a = Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(elementwise("add", a, Tensor([1.0, 2.0, 3.0])).data, [[2, 3, 4]] * 2)
    with pytest.raises(DimensionError):
        elementwise("add", a, Tensor([1.0, 2.0]))
    with pytest.raises(DimensionError):
        elementwise("mul", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        elementwise("relu", a)


def test_softmax_anchors():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    out = softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-15)
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros((2, 0))), axis=-1)


def test_logsumexp_anchors():
    assert logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-12)
    mpmath.mp.dps = 50
    ref = float(mpmath.log(sum(mpmath.exp(v) for v in (0, 1, 2))))
    assert ref == pytest.approx(2.40760596444438, abs=1e-13)
    assert abs(logsumexp(Tensor([0.0, 1.0, 2.0])).item() - ref) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_logsumexp_matches_extended_precision(x):
    mpmath.mp.dps = 40
    ref = float(mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in x)))
    assert abs(logsumexp(Tensor(x)).item() - ref) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-700, 700)))
def test_logsumexp_bounds(x):
    v = logsumexp(Tensor(x)).item()
    assert np.isfinite(v)
    assert v >= x.max()
    assert v <= x.max() + math.log(len(x)) + 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(x, c):
    p = softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p > 0) or x.max() - x.min() > 700
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, p, rtol=0, atol=1e-12)


def test_cosine_anchors():
    v = Tensor([0.3, -1.2, 2.0])
    assert cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(v, Tensor(-v.data)).item() == pytest.approx(-1.0, abs=1e-15)
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(DegenerateInputError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 1.0]))


def test_backward_anchors():
    x = parameter(3.0)
    (x * x).backward()
    assert x.grad == 6.0
    y = parameter(np.arange(5.0))
    tsum(y).backward()
    np.testing.assert_array_equal(y.grad, np.ones(5))


def test_backward_requires_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_accumulates_and_is_deterministic():
    rng = np.random.default_rng(3)
    w = parameter(rng.normal(size=(4, 3)))
    x = Tensor(rng.normal(size=(5, 4)))

    def loss():
        return tsum(gelu(matmul(x, w)) * sigmoid(matmul(x, w)))

    w.zero_grad()
    loss().backward()
    first = w.grad.copy()
    loss().backward()
    np.testing.assert_allclose(w.grad, 2 * first, rtol=1e-15)
    w.zero_grad()
    loss().backward()
    np.testing.assert_array_equal(w.grad, first)


def test_nan_is_a_hard_error():
    with pytest.raises(NumericalError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericalError):
        Tensor([1e308]) * Tensor([10.0])


def _random_graph_cases():
    rng = np.random.default_rng(11)
    a = parameter(rng.normal(size=(4, 5)))
    b = parameter(rng.normal(size=(5, 3)))
    v = parameter(rng.normal(size=3))
    g = parameter(rng.uniform(0.5, 1.5, size=5))
    beta = parameter(rng.normal(size=5))
    t = parameter(rng.normal(size=(2, 3, 4)))
    tb = parameter(rng.normal(size=(2, 4, 3)))
    table = parameter(rng.normal(size=(6, 3)))
    return {
        "matmul_gelu": (lambda: tsum(gelu(matmul(a, b) + v)), [a, b, v]),
        "sigmoid_square": (lambda: tsum(elementwise("square", sigmoid(matmul(a, b)) - v)), [a, b, v]),
        "softmax": (lambda: tsum(softmax(matmul(a, b), axis=-1) * Tensor(np.arange(3.0))), [a, b]),
        "logsumexp": (lambda: tsum(logsumexp(matmul(a, b), axis=0)), [a, b]),
        "cosine": (lambda: tsum(cosine_similarity(matmul(a, b), v.reshape(1, 3))), [a, b, v]),
        "layer_norm": (lambda: tsum(layer_norm(a, g, beta) * Tensor(np.arange(20.0).reshape(4, 5))), [a, g, beta]),
        "batched_matmul": (lambda: tsum(elementwise("square", matmul(t, tb))), [t, tb]),
        "shared_rhs_matmul": (lambda: tsum(gelu(matmul(t, b[:4]))), [t, b]),
        "take_concat": (lambda: tsum(gelu(concat([take(table, [0, 2, 2]), matmul(a[:3], b)], axis=-1))), [table, a, b]),
        "log_sigmoid": (lambda: tsum(log_sigmoid(matmul(a, b) * 3.0)), [a, b]),
        "div_mean": (lambda: (matmul(a, b) / (v * v + 1.0)).mean(), [a, b, v]),
        "transpose": (lambda: tsum(gelu(t.transpose(0, 2, 1)) * Tensor(np.arange(24.0).reshape(2, 4, 3))), [t]),
    }


@pytest.mark.parametrize("case", sorted(_random_graph_cases()))
def test_gradients_match_finite_differences(case):
    fn, params = _random_graph_cases()[case]
    assert check_gradients(fn, params, step=1e-5) < 1e-4


def test_adamw_zero_grad_no_decay_is_noop():
    p = parameter([1.0, -2.0])
    p.zero_grad()
    opt = AdamW([p], lr=0.1, weight_decay=0.0, warmup_steps=0)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_hand_value():
    p = parameter(0.5)
    p.grad = np.array(1.0)
    state = OptimizerState(learning_rate=0.1, weight_decay=0.0, warmup_steps=0, eps=1e-8)
    adamw_step([p], state)
    # m_hat = 1, v_hat = 1 after bias correction
    assert p.item() == pytest.approx(0.5 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adamw_decoupled_decay():
    p = parameter([2.0, -4.0])
    p.zero_grad()
    state = OptimizerState(learning_rate=0.1, weight_decay=0.01, warmup_steps=0)
    adamw_step([p], state)
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.001), -4.0 * (1 - 0.001)], rtol=0, atol=1e-15)


def test_adamw_warmup_and_missing_grad():
    p = parameter(0.0)
    p.grad = np.array(1.0)
    state = OptimizerState(learning_rate=1.0, weight_decay=0.0, warmup_steps=4)
    adamw_step([p], state)
    assert p.item() == pytest.approx(-0.25, rel=1e-7)
    q = parameter(1.0)
    with pytest.raises(ContractError):
        adamw_step([q], OptimizerState())


def test_checkpoint_roundtrip(tmp_path):
    arrays_in = {"a/w": np.arange(6.0).reshape(2, 3), "a/b": np.array([1.5, -2.5]), "s": np.array(3.0)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, arrays_in)
    head = path.read_bytes().split(b"END\n")[0].decode()
    assert head.startswith("PFCKPT 1\n")
    assert "a/w\t2,3\t16" in head
    back = load_checkpoint(path)
    assert set(back) == set(arrays_in)
    for k, v in arrays_in.items():
        np.testing.assert_array_equal(back[k], v)
