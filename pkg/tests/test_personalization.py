import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfusion.errors import DimensionError
from perfusion.numerics import Tensor, tsum
from perfusion.numerics.gradcheck import check_gradients, numerical_grad
from perfusion.personalization import AdaptiveNetwork, CrossNetwork, UserProfile, adapt, cross_forward, embed


def make_net(seed=0, cards=(3, 4), d=2, layers=2):
    return CrossNetwork(np.random.default_rng(seed), cards, embed_dim=d, n_layers=layers)


def test_embed_concatenates_rows():
    net = make_net(cards=(2, 2), d=2)
    net.embed[0].data[1] = [1.0, 2.0]
    net.embed[1].data[0] = [3.0, 4.0]
    u0 = embed(UserProfile((1, 0)), net)
    np.testing.assert_array_equal(u0.data, [1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(embed(UserProfile((1, 0)), net).data, u0.data)


def test_embed_gradient_hits_only_selected_rows():
    net = make_net()
    net.zero_grad()
    tsum(embed(UserProfile((2, 1)), net)).backward()
    g0, g1 = net.embed[0].grad, net.embed[1].grad
    assert np.all(g0[2] == 1.0) and np.all(np.delete(g0, 2, axis=0) == 0.0)
    assert np.all(g1[1] == 1.0) and np.all(np.delete(g1, 1, axis=0) == 0.0)


def test_embed_rejects_bad_index():
    with pytest.raises(IndexError):
        embed(UserProfile((3, 0)), make_net())
    with pytest.raises(DimensionError):
        embed(UserProfile((0,)), make_net())


def test_cross_zero_params_is_identity():
    net = make_net(layers=3)
    for layer in net.cross:
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.0
    u0 = Tensor(np.random.default_rng(1).normal(size=net.out_dim))
    assert np.array_equal(cross_forward(u0, net).data, u0.data)


def test_cross_single_layer_hand_value():
    net = CrossNetwork(np.random.default_rng(0), (1, 1), embed_dim=1, n_layers=1)
    net.cross[0].w.data[:] = [1.0, 0.0]
    net.cross[0].b.data[:] = 0.0
    np.testing.assert_array_equal(cross_forward(Tensor([1.0, 2.0]), net).data, [2.0, 4.0])


def test_cross_linear_in_w():
    net = make_net(layers=1)
    u0 = Tensor(np.random.default_rng(2).normal(size=net.out_dim))
    net.cross[0].b.data[:] = 0.0
    base = cross_forward(u0, net).data - u0.data
    net.cross[0].w.data *= 3.0
    np.testing.assert_allclose(cross_forward(u0, net).data - u0.data, 3.0 * base, rtol=1e-13)


def test_cross_length_mismatch():
    with pytest.raises(DimensionError):
        cross_forward(Tensor(np.ones(3)), make_net())


@pytest.mark.parametrize("layers", [0, 1, 2, 5])
def test_cross_preserves_length(layers):
    net = make_net(layers=layers)
    assert cross_forward(embed(UserProfile((0, 0)), net), net).shape == (net.out_dim,)


def test_distinct_profiles_distinct_u():
    net = make_net(seed=5, cards=(4, 4))
    us = {p: tuple(net(np.array([p])).data[0]) for p in [(a, b) for a in range(4) for b in range(4)]}
    assert len(set(us.values())) == 16


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12))
def test_fresh_adaptive_network_outputs_exact_zero(seed, n_in, n_out):
    rng = np.random.default_rng(seed)
    ada = AdaptiveNetwork(rng, n_in, n_out)
    out = adapt(Tensor(rng.normal(size=(3, n_in)) * 10), ada)
    assert np.all(out.data == 0.0)
    assert ada.layer0.weight.shape == (n_in, max(n_in, n_out))


def test_adaptive_network_nonzero_after_perturbation_and_has_gradient():
    rng = np.random.default_rng(7)
    ada = AdaptiveNetwork(rng, 4, 3)
    u = Tensor(rng.normal(size=4))
    target = Tensor(rng.normal(size=3))

    def loss():
        return tsum((adapt(u, ada) - target) * (adapt(u, ada) - target))

    ada.zero_grad()
    loss().backward()
    fd = numerical_grad(loss, ada.layer1.weight)
    assert np.abs(fd).max() > 1e-3
    np.testing.assert_allclose(ada.layer1.weight.grad, fd, rtol=1e-6, atol=1e-9)
    ada.layer1.weight.data += 0.1
    assert np.any(adapt(u, ada).data != 0.0)


def test_cross_network_gradients():
    net = make_net(seed=3)
    ids = np.array([[0, 1], [2, 3], [1, 1]])
    target = Tensor(np.random.default_rng(4).normal(size=(3, net.out_dim)))

    def loss():
        d = net(ids) - target
        return tsum(d * d)

    assert check_gradients(loss, net.parameters()) < 1e-4
