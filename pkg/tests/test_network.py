import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, settings, strategies as st

from ivpinn.network import (MlpNetwork, build_relu_bump, hidden_widths, init_weights, load_checkpoint,
                            mlp_forward, mlp_input_jacobian, mlp_jacobian_weight_gradient, mlp_value_and_jacobian,
                            mlp_weight_gradient, relu_derivatives, save_checkpoint, unflatten)


def naive_forward(net, x):
    a = np.asarray(x, dtype=float)
    for A, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.tanh(A @ a + b) if net.activation == "tanh" else np.maximum(A @ a + b, 0)
    return float((net.weights[-1] @ a + net.biases[-1])[0])


def test_zero_weights_output_bias():
    net = init_weights([2, 5, 5, 1], 0)
    net = net.with_flat(np.zeros(net.n_params))
    net.biases[-1][:] = 3.5
    np.testing.assert_allclose(mlp_forward(net, np.random.default_rng(0).normal(size=(4, 2))), 3.5)
    np.testing.assert_allclose(mlp_input_jacobian(net, np.ones((3, 2))), 0)


def test_tiny_network():
    net = MlpNetwork([np.array([[1.0]]), np.array([[2.0]])], [np.array([0.0]), np.array([1.0])])
    assert mlp_forward(net, [[0.0]])[0] == 1.0


def test_batched_matches_naive():
    net = init_weights([3, 7, 4, 1], 5)
    net = net.with_flat(net.flat() + 0.1 * np.random.default_rng(1).normal(size=net.n_params))
    x = np.random.default_rng(2).normal(size=(9, 3))
    np.testing.assert_allclose(mlp_forward(net, x), [naive_forward(net, p) for p in x], rtol=0, atol=1e-14)


def test_shape_validation():
    with pytest.raises(ValueError):
        MlpNetwork([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(ValueError):
        mlp_forward(init_weights([2, 3, 1], 0), np.ones((4, 3)))


def test_weight_gradient_trivial_cases():
    net = init_weights([2, 4, 1], 0)
    assert not np.any(mlp_weight_gradient(net, np.ones((3, 2)), np.zeros(3)))
    lin = MlpNetwork([np.array([[0.3, -0.2, 0.7]])], [np.array([0.1])])
    g = mlp_weight_gradient(lin, np.array([[1.0, 2.0, 3.0]]), np.array([2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0, 6.0, 2.0])


def fd_check(fun, theta, idx, h=1e-6):
    out = []
    for i in idx:
        e = np.zeros_like(theta)
        e[i] = h
        out.append((fun(theta + e) - fun(theta - e)) / (2 * h))
    return np.array(out)


def test_weight_gradient_fd():
    net = init_weights([2, 8, 8, 1], 3)
    x = np.random.default_rng(0).normal(size=(5, 2))
    c = np.random.default_rng(1).normal(size=5)
    g = mlp_weight_gradient(net, x, c)
    idx = np.random.default_rng(2).choice(net.n_params, 50, replace=False)
    fd = fd_check(lambda t: c @ mlp_forward(net.with_flat(t), x), net.flat(), idx)
    np.testing.assert_allclose(g[idx], fd, rtol=1e-6, atol=1e-9)


def test_input_jacobian_fd():
    net = init_weights([2, 10, 10, 1], 4)
    x = np.random.default_rng(0).normal(size=(10, 2))
    jac = mlp_input_jacobian(net, x)
    for d in range(2):
        e = np.zeros(2)
        e[d] = 1e-6
        fd = (mlp_forward(net, x + e) - mlp_forward(net, x - e)) / 2e-6
        np.testing.assert_allclose(jac[:, d], fd, rtol=1e-7, atol=1e-9)


def test_jacobian_weight_gradient_fd():
    net = init_weights([2, 6, 6, 1], 5)
    x = np.random.default_rng(0).normal(size=(7, 2))
    G = np.random.default_rng(1).normal(size=(7, 2))
    c = np.random.default_rng(2).normal(size=7)
    g = mlp_jacobian_weight_gradient(net, x, G, c)

    def scalar(t):
        v, jac = mlp_value_and_jacobian(net.with_flat(t), x)
        return c @ v + np.sum(G * jac)

    idx = np.random.default_rng(3).choice(net.n_params, 30, replace=False)
    np.testing.assert_allclose(g[idx], fd_check(scalar, net.flat(), idx), rtol=1e-5, atol=1e-8)


def test_relu_rejected_for_input_derivatives():
    net = init_weights([2, 3, 1], 0, activation="relu")
    with pytest.raises(ValueError):
        mlp_input_jacobian(net, np.ones((1, 2)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1.0, 1e3))
def test_tanh_derivatives_finite(seed, scale):
    net = init_weights([2, 5, 5, 1], seed)
    net = net.with_flat(np.clip(net.flat() * scale, -1e3, 1e3))
    x = np.random.default_rng(seed).normal(size=(4, 2))
    v, jac = mlp_value_and_jacobian(net, x)
    g = mlp_jacobian_weight_gradient(net, x, np.ones((4, 2)), np.ones(4))
    assert np.all(np.isfinite(v)) and np.all(np.isfinite(jac)) and np.all(np.isfinite(g))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_directional_derivative_consistency(seed):
    rng = np.random.default_rng(seed)
    net = init_weights([2, 6, 4, 1], seed)
    x = rng.normal(size=(5, 2))
    c = rng.normal(size=5)
    d = rng.normal(size=net.n_params)
    g = mlp_weight_gradient(net, x, c)
    h = 1e-6
    fd = (c @ mlp_forward(net.with_flat(net.flat() + h * d), x) - c @ mlp_forward(net.with_flat(net.flat() - h * d), x)) / (2 * h)
    assert g @ d == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_init_weights_reproducible_and_glorot():
    a, b, c = init_weights([2, 5, 1], 7), init_weights([2, 5, 1], 7), init_weights([2, 5, 1], 8)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), c.flat())
    net = init_weights([50, 50, 1], 0)
    assert np.var(net.weights[0]) == pytest.approx(2 / 100, rel=0.2)
    assert not np.any(net.biases[0])


def test_hidden_widths():
    assert hidden_widths(2, 3, 20) == [2, 20, 20, 20, 1]


def test_flat_roundtrip():
    net = init_weights([3, 4, 2, 1], 1)
    back = unflatten(net.widths, net.flat())
    np.testing.assert_array_equal(back.flat(), net.flat())


def test_checkpoint_roundtrip(tmp_path):
    net = init_weights([2, 4, 1], 9, activation="relu")
    save_checkpoint(net, tmp_path / "n.bin")
    back = load_checkpoint(tmp_path / "n.bin")
    assert back.widths == net.widths and back.activation == "relu"
    np.testing.assert_array_equal(back.flat(), net.flat())


@pytest.mark.parametrize("x_bar,h", [(0.5, 0.1), (0.3, 0.02), (0.0, 1.0)])
def test_relu_bump(x_bar, h):
    net = build_relu_bump(x_bar, h)
    assert mlp_forward(net, [[x_bar]])[0] == pytest.approx(1 / h)
    np.testing.assert_allclose(mlp_forward(net, [[x_bar - h], [x_bar + h], [x_bar + 2 * h], [x_bar - 5 * h]]),
                               0, atol=1e-12)
    # integral of |w| over its support, exactly: area of a triangle of base 2h and height 1/h
    xs = np.linspace(x_bar - h, x_bar + h, 20001)
    vals = np.abs(mlp_forward(net, xs[:, None]))
    assert trapezoid(vals, xs) == pytest.approx(1.0, rel=1e-8)


def test_relu_derivatives():
    net = build_relu_bump(0.5, 0.1)
    v, d1, d2 = relu_derivatives(net, np.array([[0.2], [0.45], [0.55], [0.5]]))
    np.testing.assert_allclose(d1[:3], [0, 100, -100], atol=1e-9)
    np.testing.assert_array_equal(d2[:3], 0)
    assert np.isinf(d2[3])
