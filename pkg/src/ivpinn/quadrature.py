"""Gaussian quadrature on the reference triangle and interval.

The reference triangle is ``{x, y >= 0, x + y <= 1}`` (area 1/2), the
reference interval is ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np
from scipy.special import roots_jacobi

MAX_PRECISION = 30


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray   # (n, dim) reference coordinates
    weights: np.ndarray  # (n,)
    precision: int

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return len(self.weights)


def _orbit6(a, b, w):
    c = 1.0 - a - b
    bary = np.array(sorted(set(permutations((a, b, c)))))
    return bary[:, :2], np.full(len(bary), w)


def _orbit3(a, b, w):
    pts = np.array([[a, a], [b, a], [a, b]])
    return pts, np.full(3, w)


def _triangle_p3():
    # Strang-Fix six-point rule, all weights equal
    return _orbit6(0.6590276223740922151783807712553963374621,
                   0.2319333685530305724967845611746928930147, 1.0 / 12.0)


def _triangle_p5():
    # Radon seven-point rule: centroid plus two vertex-directed orbits
    p1, w1 = _orbit3(0.101286507323456338800987361915, 0.79742698535308732239802527617,
                     0.0629695902724135762978419727501)
    p2, w2 = _orbit3(0.470142064105115089770441209513, 0.0597158717897698204591175809731,
                     0.0661970763942530903688246939166)
    pts = np.vstack([[[1.0 / 3.0, 1.0 / 3.0]], p1, p2])
    return pts, np.concatenate([[0.1125], w1, w2])


def _conical_product(q):
    """Collapsed Gauss rule, exact for total degree ``q``, positive weights."""
    n = (q + 2) // 2
    t, wt = roots_jacobi(n, 1.0, 0.0)      # weight (1 - t) on [-1, 1]
    u, wu = (1.0 + t) / 2.0, wt / 4.0
    s, ws = np.polynomial.legendre.leggauss(n)
    v, wv = (1.0 + s) / 2.0, ws / 2.0
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([U.ravel(), (V * (1.0 - U)).ravel()])
    return pts, np.outer(wu, wv).ravel()


def _check_precision(q):
    if not isinstance(q, (int, np.integer)) or not 1 <= q <= MAX_PRECISION:
        raise ValueError(f"unsupported quadrature precision {q!r}; expected an integer in 1..{MAX_PRECISION}")


@lru_cache(maxsize=None)
def reference_triangle_rule(q: int) -> QuadratureRule:
    """Symmetric Gauss rule of precision ``q`` on the unit triangle.

    ``q = 3`` and ``q = 5`` use the classical 6- and 7-point rules; other
    precisions (used for error measurement and Gram matrices) fall back to a
    conical product rule.
    """
    _check_precision(q)
    if q == 1:
        pts, w = np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5])
    elif q == 2:
        pts, w = _orbit3(1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0)
    elif q == 3:
        pts, w = _triangle_p3()
    elif q == 5:
        pts, w = _triangle_p5()
    else:
        pts, w = _conical_product(q)
    return QuadratureRule(pts, w, int(q))


@lru_cache(maxsize=None)
def reference_interval_rule(q: int) -> QuadratureRule:
    """Gauss-Legendre on ``[0, 1]`` with ``ceil((q + 1) / 2)`` points."""
    _check_precision(q)
    n = (q + 2) // 2
    x, w = np.polynomial.legendre.leggauss(n)
    return QuadratureRule(((1.0 + x) / 2.0)[:, None], w / 2.0, int(q))


def reference_rule(dim: int, q: int) -> QuadratureRule:
    return reference_interval_rule(q) if dim == 1 else reference_triangle_rule(q)


def map_rule(rule: QuadratureRule, vertices) -> tuple[np.ndarray, np.ndarray]:
    """Affine image of ``rule`` on one simplex or a batch of simplices.

    ``vertices`` has shape ``(rule.dim + 1, space_dim)`` for a single simplex
    or ``(ne, rule.dim + 1, space_dim)`` for a batch; an interval rule on a
    2-vertex edge embedded in the plane is allowed.  Weights are scaled by the
    ratio of the element measure to the reference measure.
    """
    v = np.asarray(vertices, dtype=float)
    single = v.ndim == 2
    if single:
        v = v[None]
    if v.shape[1] != rule.dim + 1:
        raise ValueError("vertex count does not match the rule dimension")
    origin = v[:, :1, :]
    edges = v[:, 1:, :] - origin                        # (ne, rdim, sdim)
    pts = origin + np.einsum("qr,ers->eqs", rule.points, edges)
    if rule.dim == v.shape[2]:
        jac = np.abs(np.linalg.det(edges))
    else:                                               # edge in the plane
        jac = np.linalg.norm(edges[:, 0, :], axis=1)
    if np.any(jac <= 1e-14 * np.max(np.abs(edges), axis=(1, 2)) ** rule.dim):
        raise ValueError("degenerate element")
    # |E| / |E_ref| equals the Jacobian determinant for both reference shapes
    wts = np.outer(jac, rule.weights)
    if single:
        return pts[0], wts[0]
    return pts, wts
