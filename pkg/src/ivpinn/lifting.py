"""Exact enforcement of Dirichlet data through ``B w = ubar + Phi w``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ScalarField:
    """Closed-form scalar field with its gradient.

    ``value(x)`` maps ``(n, dim)`` points to ``(n,)``; ``gradient(x)`` to
    ``(n, dim)``.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.value(np.atleast_2d(x))

    def grad(self, x):
        return self.gradient(np.atleast_2d(x))


def zero_field(dim: int) -> ScalarField:
    return ScalarField(lambda x: np.zeros(len(x)), lambda x: np.zeros((len(x), dim)))


@dataclass(frozen=True)
class BoundaryLifting:
    phi: ScalarField
    ubar: ScalarField

    def apply(self, w, dw, points):
        """Values and gradients of ``ubar + phi * w`` at ``points``."""
        return apply_B(self, w, dw, points)

    def nodal(self, w, points):
        """Values of ``B w`` only; no gradients are evaluated."""
        return self.ubar(points) + self.phi(points) * w


def apply_B(lifting: BoundaryLifting, w, dw, points):
    w = np.asarray(w, dtype=float)
    phi, dphi = lifting.phi(points), lifting.phi.grad(points)
    value = lifting.ubar(points) + phi * w
    grad = lifting.ubar.grad(points) + phi[:, None] * dw + w[:, None] * dphi
    return value, grad


def _affine_factors(vertices, dirichlet_sides):
    """Inward unit normals and anchor points of the selected polygon sides."""
    v = np.asarray(vertices, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    d = nxt - v
    cross = d[:, 0] * np.roll(d, -1, axis=0)[:, 1] - d[:, 1] * np.roll(d, -1, axis=0)[:, 0]
    if np.all(cross < 0):          # clockwise input
        return _affine_factors(v[::-1], [len(v) - 2 - s for s in dirichlet_sides])
    if not np.all(cross > 0):
        raise ValueError("domain must be a strictly convex polygon")
    sides = sorted(set(int(s) % len(v) for s in dirichlet_sides))
    normals = np.column_stack([-d[:, 1], d[:, 0]]) / np.linalg.norm(d, axis=1)[:, None]
    return normals[sides], v[sides]


def build_phi(domain, dirichlet_sides) -> ScalarField:
    """Product of the affine functions vanishing on each Dirichlet side.

    ``domain`` is either an interval ``(a, b)`` (sides 0 = left end,
    1 = right end) or the vertex list of a convex polygon (side ``s`` joins
    vertex ``s`` to vertex ``s + 1``).  Each factor is positive inside.
    """
    dom = np.asarray(domain, dtype=float)
    if dom.ndim == 1 or dom.shape[1] == 1:
        a, b = dom.ravel()
        signs, anchors = [], []
        for s in set(dirichlet_sides):
            signs.append(1.0 if s == 0 else -1.0)
            anchors.append(a if s == 0 else b)
        normals, anchors = np.array(signs)[:, None], np.array(anchors)[:, None]
    else:
        normals, anchors = _affine_factors(dom, dirichlet_sides)
    if len(normals) == 0:
        raise ValueError("at least one Dirichlet side is required")

    def factors(x):
        return np.einsum("sd,nsd->ns", normals, x[:, None, :] - anchors[None])

    def value(x):
        return np.prod(factors(x), axis=1)

    def gradient(x):
        ell = factors(x)
        grad = np.zeros_like(x, dtype=float)
        for s in range(len(normals)):
            others = np.prod(np.delete(ell, s, axis=1), axis=1)
            grad += others[:, None] * normals[s]
        return grad

    return ScalarField(value, gradient)


def coons_lifting(u: ScalarField, domain=((0.0, 1.0), (0.0, 1.0)), sides=("left", "right", "bottom", "top")) -> ScalarField:
    """Transfinite extension of the boundary trace of ``u`` on a rectangle.

    With only ``left``/``right`` this is linear interpolation in ``x``
    between the two sides; with all four it is the bilinearly blended Coons
    patch.  The result matches ``u`` exactly on the selected sides.
    """
    (x0, x1), (y0, y1) = domain
    use_x = {"left", "right"} <= set(sides)
    use_y = {"bottom", "top"} <= set(sides)
    if not (use_x or use_y) or set(sides) - {"left", "right", "bottom", "top"}:
        raise ValueError("Coons lifting needs a pair of opposite sides")

    def pieces(x):
        X, Y = x[:, 0], x[:, 1]
        s = (X - x0) / (x1 - x0)
        t = (Y - y0) / (y1 - y0)
        col = lambda a, b: np.column_stack([np.broadcast_to(a, X.shape), np.broadcast_to(b, X.shape)])
        return X, Y, s, t, col

    def value(x):
        X, Y, s, t, col = pieces(x)
        out = np.zeros(len(x))
        if use_x:
            out += (1 - s) * u(col(x0, Y)) + s * u(col(x1, Y))
        if use_y:
            out += (1 - t) * u(col(X, y0)) + t * u(col(X, y1))
        if use_x and use_y:
            corners = u(np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]]))
            out -= ((1 - s) * (1 - t) * corners[0] + s * (1 - t) * corners[1]
                    + (1 - s) * t * corners[2] + s * t * corners[3])
        return out

    def gradient(x):
        X, Y, s, t, col = pieces(x)
        ds, dt = 1.0 / (x1 - x0), 1.0 / (y1 - y0)
        g = np.zeros((len(x), 2))
        if use_x:
            L, R = col(x0, Y), col(x1, Y)
            g[:, 0] += ds * (u(R) - u(L))
            g[:, 1] += (1 - s) * u.grad(L)[:, 1] + s * u.grad(R)[:, 1]
        if use_y:
            B, T = col(X, y0), col(X, y1)
            g[:, 0] += (1 - t) * u.grad(B)[:, 0] + t * u.grad(T)[:, 0]
            g[:, 1] += dt * (u(T) - u(B))
        if use_x and use_y:
            c = u(np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]]))
            g[:, 0] -= ds * (-(1 - t) * c[0] + (1 - t) * c[1] - t * c[2] + t * c[3])
            g[:, 1] -= dt * (-(1 - s) * c[0] - s * c[1] + (1 - s) * c[2] + s * c[3])
        return g

    return ScalarField(value, gradient)
