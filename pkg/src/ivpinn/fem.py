"""Lagrange finite element spaces and interpolation matrices.

A :class:`FeSpace` of degree ``k`` places its nodes on the uniform
degree-``k`` lattice of every element.  :func:`build_interpolation_matrices`
produces the sparse matrices ``M``, ``M_x`` (and ``M_y``) mapping nodal values
to values and first derivatives of the interpolant at a list of points, which
is all the interpolated loss ever needs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .mesh import DIRICHLET, Mesh, build_lattice, facet_lattice_nodes, lattice_indices

_CENTER = {1: np.array([0.5]), 2: np.array([1.0 / 3.0, 1.0 / 3.0])}


def _exponents(dim, k):
    if dim == 1:
        return np.arange(k + 1)[:, None]
    return np.array([(a, d - a) for d in range(k + 1) for a in range(d, -1, -1)])


@lru_cache(maxsize=None)
def _lagrange_coefficients(dim: int, k: int):
    """Monomial exponents and coefficient matrix ``C`` with ``phi = mono @ C``.

    Monomials are centred on the reference barycentre to keep the local
    Vandermonde matrix well conditioned up to degree 6 or so.
    """
    exps = _exponents(dim, k)
    nodes = lattice_indices(k, dim) / k
    vander = np.prod((nodes[:, None, :] - _CENTER[dim]) ** exps[None, :, :], axis=2)
    coeffs = np.linalg.solve(vander, np.eye(len(nodes)))
    coeffs.setflags(write=False)
    return exps, coeffs


def eval_basis(k: int, ref_points, dim: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Local Lagrange basis of degree ``k`` at reference points.

    Returns values ``(n, n_local)`` and reference gradients
    ``(n, n_local, dim)``.
    """
    exps, coeffs = _lagrange_coefficients(dim, k)
    x = np.atleast_2d(np.asarray(ref_points, dtype=float)) - _CENTER[dim]
    # powers[d][:, e] = x_d ** e, plus the derivative table e * x_d ** (e - 1)
    powers, dpowers = [], []
    for d in range(dim):
        p = np.ones((len(x), k + 1))
        for e in range(1, k + 1):
            p[:, e] = p[:, e - 1] * x[:, d]
        dp = np.zeros_like(p)
        dp[:, 1:] = p[:, :-1] * np.arange(1, k + 1)
        powers.append(p)
        dpowers.append(dp)
    factors = [powers[d][:, exps[:, d]] for d in range(dim)]
    values = np.prod(factors, axis=0) @ coeffs
    grads = np.empty((len(x), coeffs.shape[1], dim))
    for d in range(dim):
        dmono = dpowers[d][:, exps[:, d]]
        for o in range(dim):
            if o != d:
                dmono = dmono * factors[o]
        grads[:, :, d] = dmono @ coeffs
    return values, grads


@dataclass(frozen=True, eq=False)
class FeSpace:
    """Continuous Lagrange space of degree ``degree`` over ``mesh``."""

    mesh: Mesh
    degree: int
    nodes: np.ndarray           # (n_nodes, dim)
    element_nodes: np.ndarray   # (ne, n_local)
    dirichlet_mask: np.ndarray  # (n_nodes,) bool

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_local(self) -> int:
        return self.element_nodes.shape[1]

    @property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    def eval_basis(self, ref_points):
        return eval_basis(self.degree, ref_points, self.mesh.dim)


def build_space(mesh: Mesh, degree: int) -> FeSpace:
    if degree < 1:
        raise ValueError("degree must be >= 1")
    lat = build_lattice(mesh, degree)
    mask = np.zeros(len(lat.points), dtype=bool)
    dirichlet = mesh.boundary_facets[mesh.boundary_tags == DIRICHLET]
    if len(dirichlet):
        mask[facet_lattice_nodes(mesh, lat, dirichlet).ravel()] = True
    return FeSpace(mesh, degree, lat.points, lat.element_nodes, mask)


@dataclass(frozen=True, eq=False)
class InterpolationMatrices:
    """Sparse maps from nodal values to point values and gradients."""

    M: sp.csr_matrix
    grads: tuple        # (M_x,) in 1D, (M_x, M_y) in 2D
    points: np.ndarray  # (n_points, dim)

    @property
    def M_dx(self):
        return self.grads[0]

    @property
    def M_dy(self):
        return self.grads[1]


def reference_coordinates(mesh: Mesh, points, cells) -> np.ndarray:
    """Reference coordinates of ``points`` inside elements ``cells``."""
    v = mesh.vertices[mesh.elements[cells]]                  # (n, dim+1, dim)
    jac = np.transpose(v[:, 1:, :] - v[:, :1, :], (0, 2, 1))  # columns are edge vectors
    rhs = (np.asarray(points) - v[:, 0, :])[..., None]
    return np.linalg.solve(jac, rhs)[..., 0]


def interpolation_matrices_at(space: FeSpace, points, cells, tol: float = 1e-10) -> InterpolationMatrices:
    """Interpolation matrices for points lying in the given elements of ``space.mesh``."""
    points = np.asarray(points, dtype=float)
    cells = np.asarray(cells)
    mesh = space.mesh
    dim = mesh.dim
    ref = reference_coordinates(mesh, points, cells)
    bary_min = np.minimum(ref.min(axis=1), 1.0 - ref.sum(axis=1))
    if np.any(bary_min < -tol):
        bad = int(np.argmin(bary_min))
        raise ValueError(f"point {points[bad]} lies outside element {int(cells[bad])}; nesting is broken")

    values, ref_grads = space.eval_basis(ref)
    v = mesh.vertices[mesh.elements[cells]]
    jac = np.transpose(v[:, 1:, :] - v[:, :1, :], (0, 2, 1))
    jinv = np.linalg.inv(jac)
    phys = np.zeros_like(ref_grads)
    for l in range(dim):
        for k in range(dim):
            phys[:, :, l] += ref_grads[:, :, k] * jinv[:, k, l][:, None]

    n, nloc = len(points), space.n_local
    indptr = np.arange(0, n * nloc + 1, nloc)
    indices = space.element_nodes[cells].ravel()
    shape = (n, space.n_nodes)
    M = sp.csr_matrix((values.ravel(), indices, indptr), shape=shape)
    grads = tuple(sp.csr_matrix((phys[:, :, d].ravel(), indices, indptr), shape=shape) for d in range(dim))
    return InterpolationMatrices(M, grads, points)


def build_interpolation_matrices(space: FeSpace, quad_points, fine_to_coarse=None) -> InterpolationMatrices:
    """Interpolation matrices at quadrature points grouped by fine element.

    ``quad_points`` has shape ``(n_fine, n_q, dim)``; ``fine_to_coarse[e]`` is
    the element of ``space.mesh`` containing fine element ``e`` (identity when
    omitted).  Rows are ordered element by element.
    """
    quad_points = np.asarray(quad_points, dtype=float)
    n_fine, nq = quad_points.shape[:2]
    parents = np.arange(n_fine) if fine_to_coarse is None else np.asarray(fine_to_coarse)
    cells = np.repeat(parents, nq)
    return interpolation_matrices_at(space, quad_points.reshape(-1, quad_points.shape[2]), cells)


def nodal_interpolant(space: FeSpace, func) -> np.ndarray:
    """Nodal values of ``func`` (a callable on ``(n, dim)`` points)."""
    return np.asarray(func(space.nodes), dtype=float)
