"""Fully connected feed-forward networks with hand-written derivatives.

The chain is ``x_0 = x``, ``x_l = rho(A_l x_{l-1} + b_l)`` for the hidden
layers and a linear output ``w = A_L x_{L-1} + b_L``.  Batches are stored
row-wise, so a layer acts as ``z = x @ A.T + b``.

Only what training needs is provided: forward values, reverse-mode weight
gradients of ``sum_p c_p w(x_p)``, the input Jacobian, and the reverse pass
through the Jacobian (for the loss that is not interpolated).  Flat parameter
vectors list, layer by layer, ``A_l`` in row-major order followed by ``b_l``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu")
_MAGIC = b"MLPW"


@dataclass
class MlpNetwork:
    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        prev = self.weights[0].shape[1]
        for A, b in zip(self.weights, self.biases):
            if A.shape[1] != prev or b.shape != (A.shape[0],):
                raise ValueError("inconsistent layer shapes")
            prev = A.shape[0]
        if prev != 1:
            raise ValueError("output layer must have width 1")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [A.shape[0] for A in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(A.size + b.size for A, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([A.ravel(), b]) for A, b in zip(self.weights, self.biases)])

    def with_flat(self, theta) -> "MlpNetwork":
        return unflatten(self.widths, theta, self.activation)

    def copy(self) -> "MlpNetwork":
        return self.with_flat(self.flat())

    def __call__(self, points):
        return mlp_forward(self, points)


def unflatten(widths, theta, activation="tanh") -> MlpNetwork:
    theta = np.asarray(theta, dtype=float)
    expected = sum(n_out * (n_in + 1) for n_in, n_out in zip(widths[:-1], widths[1:]))
    if theta.size != expected:
        raise ValueError(f"expected {expected} parameters, got {theta.size}")
    weights, biases, pos = [], [], 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        weights.append(theta[pos:pos + n_out * n_in].reshape(n_out, n_in).copy())
        pos += n_out * n_in
        biases.append(theta[pos:pos + n_out].copy())
        pos += n_out
    return MlpNetwork(weights, biases, activation)


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _dact(name, z, a):
    """First derivative of the activation given pre-activation and output."""
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(float)


def _points(net, points):
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != net.input_dim:
        raise ValueError(f"points have dimension {x.shape[1]}, network expects {net.input_dim}")
    return x


def _forward(net, x):
    acts, pre = [x], []
    for A, b in zip(net.weights[:-1], net.biases[:-1]):
        z = acts[-1] @ A.T + b
        pre.append(z)
        acts.append(_act(net.activation, z))
    out = acts[-1] @ net.weights[-1].T + net.biases[-1]
    return out[:, 0], acts, pre


def mlp_forward(net: MlpNetwork, points) -> np.ndarray:
    """Network output at each point, shape ``(n,)``."""
    return _forward(net, _points(net, points))[0]


def _pack(grads_A, grads_b):
    return np.concatenate([np.concatenate([gA.ravel(), gb]) for gA, gb in zip(grads_A, grads_b)])


def mlp_value_and_weight_gradient(net: MlpNetwork, points, cotangent_fn):
    """Forward pass, then the weight gradient of ``sum_p c_p w(x_p)``.

    ``cotangent_fn`` receives the output values and returns ``(result, c)``
    so a loss can be evaluated between the two passes without recomputing
    the forward chain.  Returns ``(result, flat_gradient)``.
    """
    x = _points(net, points)
    out, acts, pre = _forward(net, x)
    result, cot = cotangent_fn(out)
    return result, _backward(net, acts, pre, np.asarray(cot, dtype=float))


def _backward(net, acts, pre, cot):
    L = len(net.weights)
    gA, gb = [None] * L, [None] * L
    delta = cot[:, None]                      # d/dz of the output layer
    for l in range(L - 1, -1, -1):
        gA[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            back = delta @ net.weights[l]
            delta = back * _dact(net.activation, pre[l - 1], acts[l])
    return _pack(gA, gb)


def mlp_weight_gradient(net: MlpNetwork, points, output_cotangents) -> np.ndarray:
    """Gradient of ``sum_p c_p w(x_p)`` with respect to all weights."""
    return mlp_value_and_weight_gradient(net, points, lambda out: (None, output_cotangents))[1]


def _require_smooth(net):
    if net.activation != "tanh":
        raise ValueError("input derivatives need a smooth activation; got " + net.activation)


def _forward_tangent(net, x):
    """Forward chain with tangents along each input direction."""
    n, d = x.shape
    acts, pre = [x], []
    tang = [np.broadcast_to(np.eye(d), (n, d, d))]     # tang[l][p, i, :] = d x_l / d x_i
    for A, b in zip(net.weights[:-1], net.biases[:-1]):
        z = acts[-1] @ A.T + b
        a = np.tanh(z)
        pre.append(z)
        acts.append(a)
        tang.append((tang[-1] @ A.T) * (1.0 - a * a)[:, None, :])
    out = acts[-1] @ net.weights[-1].T + net.biases[-1]
    jac = (tang[-1] @ net.weights[-1].T)[:, :, 0]
    return out[:, 0], jac, acts, pre, tang


def mlp_input_jacobian(net: MlpNetwork, points) -> np.ndarray:
    """Spatial gradient ``dw/dx`` at each point, shape ``(n, input_dim)``."""
    _require_smooth(net)
    return _forward_tangent(net, _points(net, points))[1]


def mlp_value_and_jacobian(net: MlpNetwork, points):
    _require_smooth(net)
    out, jac, *_ = _forward_tangent(net, _points(net, points))
    return out, jac


def mlp_jacobian_weight_gradient(net: MlpNetwork, points, gradient_cotangents, value_cotangents=None,
                                 cotangent_fn=None):
    """Reverse pass through values and input gradients of the network.

    Computes the weight gradient of
    ``sum_p [c_p w(x_p) + g_p . grad_x w(x_p)]``.  As with
    :func:`mlp_value_and_weight_gradient`, a ``cotangent_fn`` taking
    ``(values, jacobian)`` and returning ``(result, c, g)`` may be passed
    instead of fixed cotangents; the return value is then
    ``(result, gradient)``.
    """
    _require_smooth(net)
    x = _points(net, points)
    out, jac, acts, pre, tang = _forward_tangent(net, x)
    result = None
    if cotangent_fn is not None:
        result, value_cotangents, gradient_cotangents = cotangent_fn(out, jac)
    n = len(x)
    c = np.zeros(n) if value_cotangents is None else np.asarray(value_cotangents, dtype=float)
    g = np.asarray(gradient_cotangents, dtype=float).reshape(n, -1)

    L = len(net.weights)
    gA, gb = [None] * L, [None] * L
    A_out = net.weights[-1]
    gA[-1] = c[None, :] @ acts[-1] + np.einsum("pi,pik->k", g, tang[-1])[None, :]
    gb[-1] = np.array([c.sum()])
    xbar = c[:, None] * A_out                          # (n, N_{L-1})
    tbar = g[:, :, None] * A_out[None, :, :]           # (n, d, N_{L-1})
    for l in range(L - 2, -1, -1):
        a = acts[l + 1]
        s = 1.0 - a * a
        zdot = tang[l] @ net.weights[l].T             # tangent of the pre-activation
        zdot_bar = tbar * s[:, None, :]
        z_bar = xbar * s + np.sum(tbar * (-2.0 * a * s)[:, None, :] * zdot, axis=1)
        gA[l] = z_bar.T @ acts[l] + np.einsum("pik,pij->kj", zdot_bar, tang[l])
        gb[l] = z_bar.sum(axis=0)
        if l > 0:
            xbar = z_bar @ net.weights[l]
            tbar = zdot_bar @ net.weights[l]
    grad = _pack(gA, gb)
    return (result, grad) if cotangent_fn is not None else grad


def init_weights(widths, seed=None, activation: str = "tanh") -> MlpNetwork:
    """Glorot-uniform weights and zero biases; reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpNetwork(weights, biases, activation)


def hidden_widths(input_dim: int, layers: int, width: int) -> list[int]:
    return [input_dim] + [width] * layers + [1]


def build_relu_bump(x_bar: float, h: float) -> MlpNetwork:
    """One-hidden-layer ReLU network realising a hat of height ``1/h``.

    The hat is supported on ``(x_bar - h, x_bar + h)`` and has unit integral.
    """
    if h <= 0:
        raise ValueError("half-width must be positive")
    A1 = np.full((3, 1), 1.0 / h)
    b1 = np.array([(-x_bar + h) / h, -x_bar / h, (-x_bar - h) / h])
    A2 = np.array([[1.0 / h, -2.0 / h, 1.0 / h]])
    return MlpNetwork([A1, A2], [b1, np.zeros(1)], "relu")


def relu_derivatives(net: MlpNetwork, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value, first and second derivative of a scalar-input ReLU network.

    The network is piecewise linear, so the second derivative vanishes away
    from the kinks; at a kink (pre-activation exactly zero) it is reported
    as ``inf``.
    """
    if net.activation != "relu" or net.input_dim != 1:
        raise ValueError("expects a scalar-input ReLU network")
    x = _points(net, points)
    value = mlp_forward(net, x)
    tang = np.ones((len(x), 1))
    kink = np.zeros(len(x), dtype=bool)
    a = x
    for A, b in zip(net.weights[:-1], net.biases[:-1]):
        z = a @ A.T + b
        kink |= np.any((z == 0) & (tang @ A.T != 0), axis=1)
        tang = (tang @ A.T) * (z > 0)
        a = np.maximum(z, 0.0)
    d1 = (tang @ net.weights[-1].T)[:, 0]
    d2 = np.where(kink, np.inf, 0.0)
    return value, d1, d2


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(net: MlpNetwork, path) -> None:
    """Little-endian header (magic, activation, depth, widths) then float64 weights."""
    widths = net.widths
    header = _MAGIC + struct.pack("<II", ACTIVATIONS.index(net.activation), len(widths))
    header += struct.pack(f"<{len(widths)}I", *widths)
    Path(path).write_bytes(header + net.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> MlpNetwork:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path} is not a network checkpoint")
    act, depth = struct.unpack_from("<II", data, 4)
    widths = list(struct.unpack_from(f"<{depth}I", data, 12))
    theta = np.frombuffer(data, dtype="<f8", offset=12 + 4 * depth)
    return unflatten(widths, theta.astype(float), ACTIVATIONS[act])
