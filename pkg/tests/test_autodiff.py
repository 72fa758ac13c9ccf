import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ruleworth.autodiff import (
    Activation,
    AdamState,
    DerivativeRequest,
    NetworkSpec,
    NetworkState,
    Surrogate,
    adam_step,
    forward,
    init_network,
    input_derivative,
    load_checkpoint,
    loss_gradient,
    save_checkpoint,
    unflatten,
)
from ruleworth.errors import DerivativeOrderError
from ruleworth.validation import fd_derivative, multi_indices, reference_forward


def nested_jacfwd(net, x, mi, out):
    """d^mi f_out at one point by repeated forward-mode differentiation of the plain network."""
    layers = unflatten(net.spec, jnp.asarray(net.params))

    def f(z):
        return Surrogate(net.spec, layers).forward(z[None, :])[0, out]

    g = f
    for axis, k in enumerate(mi):
        for _ in range(k):
            g = (lambda h, a: (lambda z: jax.jacfwd(h)(z)[a]))(g, axis)
    return float(g(jnp.asarray(x)))


SMALL = [
    NetworkSpec(2, 2, 2, 6, Activation.TANH),
    NetworkSpec(2, 1, 3, 5, Activation.SIN),
    NetworkSpec(3, 1, 1, 4, Activation.TANH),
    NetworkSpec(1, 1, 2, 7, Activation.SIN),
]


@pytest.mark.parametrize("spec", SMALL, ids=lambda s: f"{s.activation.value}{s.input_dim}d")
def test_taylor_matches_nested_forward_mode(spec):
    net = init_network(spec, 3)
    # larger weights make the high-order terms non-trivial
    net = net.__class__(spec, net.params * 1.7)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(3, spec.input_dim))
    for order in range(0, 5):
        for mi in multi_indices(spec.input_dim, order):
            for c in range(spec.output_dim):
                got = input_derivative(net, x, DerivativeRequest(mi, c))
                want = [nested_jacfwd(net, xi, mi, c) for xi in x]
                np.testing.assert_allclose(np.ravel(got), want, rtol=1e-10, atol=1e-11)


@settings(max_examples=15)
@given(st.integers(0, 1000), st.sampled_from([Activation.TANH, Activation.SIN]))
def test_second_derivatives_against_differences(seed, act):
    spec = NetworkSpec(2, 1, 2, 8, act)
    net = init_network(spec, seed)
    x = np.random.default_rng(seed).uniform(-1, 1, size=(5, 2))
    for mi in multi_indices(2, 2):
        ad = np.ravel(input_derivative(net, x, DerivativeRequest(mi)))
        fd = fd_derivative(lambda z: reference_forward(net, z)[:, 0], x, mi, 1e-3)
        np.testing.assert_allclose(ad, fd, rtol=1e-4, atol=1e-6)


def test_relu_refuses_second_order():
    net = init_network(NetworkSpec(2, 1, 1, 4, Activation.RELU), 0)
    with pytest.raises(DerivativeOrderError):
        input_derivative(net, np.zeros((1, 2)), DerivativeRequest((1, 1)))
    d = input_derivative(net, np.ones((1, 2)), DerivativeRequest((1, 0)))
    assert np.all(np.isfinite(d))


def test_order_above_four_rejected():
    with pytest.raises(DerivativeOrderError):
        DerivativeRequest((3, 2))
    with pytest.raises(ValueError):
        DerivativeRequest((-1, 0))


def test_bad_points_rejected():
    net = init_network(NetworkSpec(2, 1, 1, 4), 0)
    with pytest.raises(ValueError):
        forward(net, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        forward(net, np.array([[0.0, np.nan]]))
    with pytest.raises(ValueError):
        input_derivative(net, np.zeros((1, 2)), DerivativeRequest((1, 0, 0)))
    with pytest.raises(ValueError):
        input_derivative(net, np.zeros((1, 2)), DerivativeRequest((1, 0), output_index=1))


def test_glorot_init_and_layout():
    spec = NetworkSpec(3, 2, 2, 10)
    net = init_network(spec, 5)
    assert net.params.shape == (3 * 10 + 10 + 10 * 10 + 10 + 10 * 2 + 2,)
    for w, b in net.layers():
        limit = math.sqrt(6.0 / sum(w.shape))
        assert np.all(np.abs(w) <= limit)
        assert np.all(b == 0)
    np.testing.assert_array_equal(init_network(spec, 5).params, net.params)
    assert not np.array_equal(init_network(spec, 6).params, net.params)


def test_adam_matches_hand_update():
    spec = NetworkSpec(1, 1, 1, 3)
    net = init_network(spec, 0)
    opt = AdamState.zeros(spec.n_params)
    rng = np.random.default_rng(1)
    p, m, v = net.params.copy(), np.zeros_like(net.params), np.zeros_like(net.params)
    for t in range(1, 4):
        g = rng.standard_normal(p.shape)
        net, opt = adam_step(net, opt, g)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(net.params, p, rtol=0, atol=1e-15)
    assert opt.step == 3
    with pytest.raises(FloatingPointError):
        adam_step(net, opt, np.full(p.shape, np.inf))
    with pytest.raises(ValueError):
        adam_step(net, opt, np.zeros(2))


def test_loss_gradient_is_finite_checked():
    net = init_network(NetworkSpec(1, 1, 1, 3), 0)
    value, g = loss_gradient(net, lambda s: jnp.sum(s.forward(jnp.ones((2, 1))) ** 2))
    assert value >= 0 and g.shape == net.params.shape
    with pytest.raises(FloatingPointError):
        loss_gradient(net, lambda s: jnp.sum(s.forward(jnp.ones((1, 1)))) / 0.0 * jnp.inf)


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    spec = NetworkSpec(2, 3, 2, 5, Activation.SIN)
    net = init_network(spec, 9)
    opt = AdamState(np.linspace(-1, 1, spec.n_params) / 3, np.full(spec.n_params, 1 / 7), step=4)
    save_checkpoint(tmp_path / "c.json", net, opt)
    net2, opt2 = load_checkpoint(tmp_path / "c.json")
    assert net2.spec == spec and net2.rng_seed == 9
    np.testing.assert_array_equal(net2.params, net.params)
    np.testing.assert_array_equal(opt2.first_moment, opt.first_moment)
    np.testing.assert_array_equal(opt2.second_moment, opt.second_moment)
    assert opt2.step == 4
    save_checkpoint(tmp_path / "n.json", net)
    assert load_checkpoint(tmp_path / "n.json")[1] is None


def test_derivatives_dict_contains_zero_index():
    spec = NetworkSpec(2, 1, 1, 4)
    net = init_network(spec, 0)
    sur = Surrogate(spec, unflatten(spec, jnp.asarray(net.params)))
    out = sur.derivatives(jnp.zeros((2, 2)), [(2, 0)])
    assert (0, 0) in out and (2, 0) in out
    np.testing.assert_allclose(out[(0, 0)], forward(net, np.zeros((2, 2))))


def one_sin_unit(w):
    # params: W1 = w, b1 = 0, W2 = 1, b2 = 0
    return NetworkState(NetworkSpec(1, 1, 1, 1, Activation.SIN), np.array([w, 0.0, 1.0, 0.0]))


def test_single_sin_unit_closed_form():
    assert forward(one_sin_unit(1.0), np.zeros((1, 1)))[0, 0] == 0.0
    w = 1.7
    x = np.linspace(-1, 1, 9)[:, None]
    net = one_sin_unit(w)
    d2 = input_derivative(net, x, DerivativeRequest((2,)))
    np.testing.assert_allclose(np.ravel(d2), -(w**2) * np.sin(w * x[:, 0]), rtol=1e-13, atol=1e-15)
    d3 = input_derivative(net, x, DerivativeRequest((3,)))
    np.testing.assert_allclose(np.ravel(d3), -(w**3) * np.cos(w * x[:, 0]), rtol=1e-13)


def straight_line(params, x):
    """2-16-16-1 tanh network written out by hand from the flat parameter vector."""
    w1, p = params[:32].reshape(2, 16), 32
    b1, p = params[p : p + 16], p + 16
    w2, p = params[p : p + 256].reshape(16, 16), p + 256
    b2, p = params[p : p + 16], p + 16
    w3, p = params[p : p + 16].reshape(16, 1), p + 16
    b3 = params[p : p + 1]
    out = []
    for row in x:
        h1 = [math.tanh(sum(row[i] * w1[i, j] for i in range(2)) + b1[j]) for j in range(16)]
        h2 = [math.tanh(sum(h1[i] * w2[i, j] for i in range(16)) + b2[j]) for j in range(16)]
        out.append(sum(h2[i] * w3[i, 0] for i in range(16)) + b3[0])
    return np.array(out)


def test_forward_matches_straight_line_evaluator():
    spec = NetworkSpec(2, 1, 2, 16, Activation.TANH)
    rng = np.random.default_rng(3)
    net = NetworkState(spec, rng.normal(0, 0.5, spec.n_params))
    x = rng.uniform(-1, 1, (5, 2))
    np.testing.assert_allclose(np.ravel(forward(net, x)), straight_line(net.params, x), rtol=1e-13)
