"""Quadrature-based Petrov-Galerkin assembly.

Everything the loss needs is built once per (problem, discretization, coarse
mesh): the fine mesh ``T_h`` (uniform refinement of ``T_H`` by ``k_int``), the
interpolation space ``U_H`` (degree ``k_int`` on ``T_H``), the test space
``V_h`` (degree ``k_test`` on ``T_h``, Dirichlet nodes removed), a
precision-``q`` rule on every fine element and Neumann edge, and the sparse
operator ``A[i, j] = a_h(phi_hat_j, phi_i)`` acting on interpolation-node
values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FeSpace, InterpolationMatrices, build_interpolation_matrices, build_space, interpolation_matrices_at
from .lifting import BoundaryLifting, ScalarField, build_phi
from .mesh import DIRICHLET, NEUMANN, SIDES, Mesh, build_interval_mesh, build_structured_mesh, refine_nested
from .quadrature import map_rule, reference_interval_rule, reference_rule

SUPPORTED_CONFIGS = ((1, 3), (1, 5), (2, 5))   # (k_test, q)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class DiscretizationConfig:
    """Test degree, quadrature precision and interpolation degree.

    ``k_int`` defaults to ``q + 2 - k_test``.
    """

    k_test: int
    q: int
    k_int: int | None = None

    def __post_init__(self):
        if self.k_int is None:
            object.__setattr__(self, "k_int", self.q + 2 - self.k_test)
        if self.k_test < 1 or self.k_int < 1:
            raise ConfigurationError("polynomial degrees must be >= 1")
        if self.q < 2 * self.k_test:
            raise ConfigurationError(f"quadrature precision q={self.q} must be >= 2*k_test={2 * self.k_test}")

    @property
    def supported(self) -> bool:
        return (self.k_test, self.q) in SUPPORTED_CONFIGS and self.k_int == self.q + 2 - self.k_test

    @property
    def label(self) -> str:
        return f"{self.k_test}_{self.q}"


@dataclass(frozen=True, eq=False)
class ProblemDefinition:
    """``-div(mu grad u) + beta . grad u + sigma u = f`` with mixed boundary data.

    Coefficients and data are callables on ``(n, dim)`` points.  ``ubar`` is
    a closed-form lifting equal to ``g`` on the Dirichlet boundary and
    ``psi(points, normals)`` the Neumann flux ``mu du/dn``.  With
    ``nonlinear_p`` set, the reaction is ``sigma * exp(-p u^2)``.
    """

    dim: int
    mu: Callable
    beta: Callable
    sigma: Callable
    f: Callable
    ubar: ScalarField
    psi: Callable | None = None
    boundary: dict = field(default_factory=dict)
    domain: tuple = ((0.0, 1.0), (0.0, 1.0))
    nonlinear_p: float | None = None
    mu0: float = 0.0

    @property
    def sides(self) -> tuple:
        return ("left", "right") if self.dim == 1 else SIDES

    def tag(self, side) -> str:
        return self.boundary.get(side, DIRICHLET)

    def dirichlet_sides(self) -> list[str]:
        return [s for s in self.sides if self.tag(s) == DIRICHLET]

    def build_mesh(self, nx: int, ny: int | None = None) -> Mesh:
        spec = {s: self.tag(s) for s in self.sides}
        if self.dim == 1:
            return build_interval_mesh(nx, self.domain, spec)
        return build_structured_mesh(nx, ny, self.domain, spec)

    def lifting(self) -> BoundaryLifting:
        if self.dim == 1:
            phi = build_phi(self.domain, [self.sides.index(s) for s in self.dirichlet_sides()])
        else:
            (x0, x1), (y0, y1) = self.domain
            polygon = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            phi = build_phi(polygon, [SIDES.index(s) for s in self.dirichlet_sides()])
        return BoundaryLifting(phi, self.ubar)


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    problem: ProblemDefinition
    config: DiscretizationConfig
    mesh_H: Mesh
    mesh_h: Mesh
    space_U: FeSpace
    space_V: FeSpace
    test_nodes: np.ndarray          # free V_h nodes, one residual each
    points: np.ndarray              # (n_q, dim) quadrature points on T_h
    weights: np.ndarray             # (n_q,)
    interp: InterpolationMatrices   # U_H at the quadrature points
    test: InterpolationMatrices     # V_h (test columns only) at the quadrature points
    mu_q: np.ndarray
    beta_q: np.ndarray
    sigma_q: np.ndarray
    f_q: np.ndarray
    A_dc: sp.csr_matrix             # diffusion + convection part
    A_lin: sp.csr_matrix            # A_dc plus the linear reaction term
    b: np.ndarray
    gamma: np.ndarray
    nonlinear_p: float | None = None

    @property
    def n_test(self) -> int:
        return len(self.test_nodes)

    @property
    def n_nodes(self) -> int:
        return self.space_U.n_nodes

    @property
    def nodes(self) -> np.ndarray:
        """Interpolation nodes of ``U_H``: where the network is evaluated."""
        return self.space_U.nodes

    @property
    def n_free(self) -> int:
        return int((~self.space_U.dirichlet_mask).sum())


def _eval(name, fn, pts, *args):
    vals = np.asarray(fn(pts, *args), dtype=float)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        where = pts[np.argwhere(bad)[0][0]]
        raise FloatingPointError(f"{name} is not finite at quadrature point {where}")
    return vals


def _outward_normals(mesh: Mesh, facets, owners):
    v = mesh.vertices
    if mesh.dim == 1:
        other = np.where(mesh.elements[owners, 0] == facets[:, 0], mesh.elements[owners, 1], mesh.elements[owners, 0])
        return np.sign(v[facets[:, 0], 0] - v[other, 0])[:, None]
    a, b = v[facets[:, 0]], v[facets[:, 1]]
    d = b - a
    n = np.column_stack([d[:, 1], -d[:, 0]]) / np.linalg.norm(d, axis=1)[:, None]
    centroid = v[mesh.elements[owners]].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, centroid - a) > 0
    n[flip] *= -1
    return n


def _load_vector(problem, config, mesh_h, space_V, test_nodes, points, weights, test):
    f_q = _eval("f", problem.f, points)
    b = test.M.T @ (weights * f_q)
    mask = mesh_h.boundary_tags == NEUMANN
    if np.any(mask):
        if problem.psi is None:
            raise ConfigurationError("Neumann boundary present but no flux psi given")
        facets = mesh_h.boundary_facets[mask]
        owners = mesh_h.boundary_facet_elements()[mask]
        normals = _outward_normals(mesh_h, facets, owners)
        if mesh_h.dim == 1:
            pts, wts = mesh_h.vertices[facets[:, 0]], np.ones(len(facets))
            nrm, cells = normals, owners
        else:
            rule = reference_interval_rule(config.q)
            pts, wts = map_rule(rule, mesh_h.vertices[facets])
            nq = len(rule)
            pts, wts = pts.reshape(-1, 2), wts.ravel()
            nrm, cells = np.repeat(normals, nq, axis=0), np.repeat(owners, nq)
        psi = _eval("psi", problem.psi, pts, nrm)
        edge_test = interpolation_matrices_at(space_V, pts, cells).M[:, test_nodes]
        b = b + edge_test.T @ (wts * psi)
    return f_q, np.asarray(b).ravel()


def assemble_system(problem: ProblemDefinition, config: DiscretizationConfig, mesh_H: Mesh,
                    refinement: int | None = None, gamma=None, check_dimensions: bool = True) -> AssembledSystem:
    """Build the interpolated Petrov-Galerkin system on ``T_H`` and its refinement."""
    s = config.k_int if refinement is None else refinement
    mesh_h = refine_nested(mesh_H, s)
    space_U = build_space(mesh_H, config.k_int)
    space_V = build_space(mesh_h, config.k_test)
    test_nodes = space_V.free_nodes
    if check_dimensions and (~space_U.dirichlet_mask).sum() > len(test_nodes):
        raise ConfigurationError(
            f"dim U_H0 = {(~space_U.dirichlet_mask).sum()} exceeds dim V_h = {len(test_nodes)}; "
            "the pairing cannot be inf-sup stable")

    rule = reference_rule(mesh_H.dim, config.q)
    pts, wts = map_rule(rule, mesh_h.element_vertices())
    interp = build_interpolation_matrices(space_U, pts, mesh_h.parent_map)
    test_full = build_interpolation_matrices(space_V, pts)
    test = InterpolationMatrices(test_full.M[:, test_nodes].tocsr(),
                                 tuple(g[:, test_nodes].tocsr() for g in test_full.grads), test_full.points)
    points, weights = interp.points, wts.ravel()

    mu_q = _eval("mu", problem.mu, points)
    if np.any(mu_q <= max(problem.mu0, 0.0)):
        where = points[np.argmin(mu_q)]
        raise ConfigurationError(f"diffusion coefficient not bounded below by mu0 at {where}")
    beta_q = _eval("beta", problem.beta, points).reshape(len(points), -1)
    sigma_q = _eval("sigma", problem.sigma, points)

    diag = lambda v: sp.diags(v, format="csr")
    A_dc = sp.csr_matrix((len(test_nodes), space_U.n_nodes))
    for d in range(mesh_H.dim):
        A_dc = A_dc + test.grads[d].T @ diag(weights * mu_q) @ interp.grads[d]
        A_dc = A_dc + test.M.T @ diag(weights * beta_q[:, d]) @ interp.grads[d]
    A_dc = A_dc.tocsr()
    A_lin = (A_dc + test.M.T @ diag(weights * sigma_q) @ interp.M).tocsr()

    f_q, b = _load_vector(problem, config, mesh_h, space_V, test_nodes, points, weights, test)
    gamma = np.ones(len(test_nodes)) if gamma is None else np.asarray(gamma, dtype=float)
    return AssembledSystem(problem, config, mesh_H, mesh_h, space_U, space_V, test_nodes, points, weights,
                           interp, test, mu_q, beta_q, sigma_q, f_q, A_dc, A_lin, b, gamma, problem.nonlinear_p)


def with_problem_data(system: AssembledSystem, problem: ProblemDefinition) -> AssembledSystem:
    """Reuse the matrices of ``system`` with a new load and nonlinearity parameter.

    The coefficients ``mu``, ``beta`` and ``sigma`` of ``problem`` must equal
    those used to assemble ``system``; only ``f``, ``psi``, ``ubar`` and
    ``nonlinear_p`` may differ.  Used for parametric families.
    """
    f_q, b = _load_vector(problem, system.config, system.mesh_h, system.space_V, system.test_nodes,
                          system.points, system.weights, system.test)
    return dataclasses.replace(system, problem=problem, f_q=f_q, b=b, nonlinear_p=problem.nonlinear_p)


def compute_residuals(system: AssembledSystem, u_nodes):
    """Residuals ``r_i = F_h(phi_i) - a_h(I_H u, phi_i)``, loss and its gradient.

    Returns ``(r, loss, dloss_du)`` with ``loss = sum_i r_i^2 / gamma_i`` and
    the gradient taken with respect to the interpolation-node values.
    """
    u = np.asarray(u_nodes, dtype=float)
    if u.shape != (system.n_nodes,):
        raise ValueError(f"expected {system.n_nodes} nodal values, got shape {u.shape}")
    p = system.nonlinear_p
    if p is None:
        r = system.b - system.A_lin @ u
        s = r / system.gamma
        grad = -2.0 * (system.A_lin.T @ s)
    else:
        uq = system.interp.M @ u
        e = np.exp(-p * uq * uq)
        ws = system.weights * system.sigma_q
        r = system.b - system.A_dc @ u - system.test.M.T @ (ws * e)
        s = r / system.gamma
        ts = system.test.M @ s
        grad = -2.0 * (system.A_dc.T @ s + system.interp.M.T @ (ws * (-2.0 * p * uq * e) * ts))
    return r, float(r @ s), grad


def solve_petrov_galerkin(system: AssembledSystem, lifting: BoundaryLifting | None = None) -> np.ndarray:
    """Nodal values of the discrete solution of the linear system, by direct solve.

    Dirichlet nodes take the lifting values; the free values solve the square
    system, or the ``gamma``-weighted least-squares problem when there are
    more test functions than free nodes.
    """
    if system.nonlinear_p is not None:
        raise ConfigurationError("direct solve is only available for linear problems")
    lifting = lifting or system.problem.lifting()
    mask = system.space_U.dirichlet_mask
    u = np.zeros(system.n_nodes)
    u[mask] = lifting.nodal(np.zeros(mask.sum()), system.nodes[mask])
    rhs = system.b - system.A_lin[:, mask] @ u[mask]
    A = system.A_lin[:, ~mask].tocsc()
    if A.shape[0] == A.shape[1]:
        u[~mask] = spla.spsolve(A, rhs)
    elif A.shape[0] > A.shape[1]:
        Gi = sp.diags(1.0 / system.gamma)
        u[~mask] = spla.spsolve((A.T @ Gi @ A).tocsc(), A.T @ (Gi @ rhs))
    else:
        raise ConfigurationError("underdetermined system: more free nodes than test functions")
    return u


# -- inf-sup diagnostic -------------------------------------------------------

@dataclass(frozen=True)
class InfSupReport:
    alpha_tilde: float
    c_h: float
    C_h: float
    dim_U0: int
    dim_V: int


def h1_gram(space: FeSpace, mesh: Mesh, parent_map=None, precision: int | None = None) -> sp.csr_matrix:
    """``H^1`` Gram matrix of ``space`` integrated on the (finer) ``mesh``."""
    q = precision or max(2 * space.degree, 1)
    pts, wts = map_rule(reference_rule(mesh.dim, q), mesh.element_vertices())
    mats = build_interpolation_matrices(space, pts, parent_map)
    W = sp.diags(wts.ravel())
    G = mats.M.T @ W @ mats.M
    for g in mats.grads:
        G = G + g.T @ W @ g
    return G.tocsr()


def _gamma_gram_extremes(gamma, G_V, dense_max=500):
    """Extreme eigenvalues of ``diag(gamma) x = lambda G_V x``."""
    if len(gamma) <= dense_max:
        lam = sla.eigh(np.diag(gamma), G_V.toarray(), eigvals_only=True)
        return lam.min(), lam.max()
    # lambda = 1 / mu with mu an eigenvalue of D G_V D, D = diag(gamma)^(-1/2)
    D = sp.diags(1.0 / np.sqrt(gamma))
    B = (D @ G_V @ D).tocsc()
    mu_max = spla.eigsh(B, k=1, which="LA", return_eigenvectors=False)[0]
    mu_min = spla.eigsh(B, k=1, sigma=0.0, which="LM", return_eigenvectors=False)[0]
    return 1.0 / mu_max, 1.0 / mu_min


def compute_infsup(system: AssembledSystem, max_dim: int = 3000) -> InfSupReport:
    """Discrete inf-sup constant of ``a_h`` on ``U_H0 x V_h`` and the norm-equivalence constants.

    ``alpha_tilde`` is the smallest singular value of
    ``G_V^{-1/2} A G_U^{-1/2}``, obtained from the generalized eigenproblem
    ``A^T G_V^{-1} A x = lambda G_U x``.  ``c_h`` and ``C_h`` are the extreme
    square-rooted eigenvalues of ``diag(gamma)`` against ``G_V``.

    The eigenproblem is dense in ``dim U_H0``, which is limited to ``max_dim``;
    ``G_V`` is only factorized, so ``V_h`` may be larger.
    """
    free_U = system.space_U.free_nodes
    dim_U0, dim_V = len(free_U), system.n_test
    if dim_U0 > max_dim:
        raise ValueError(f"inf-sup diagnostic limited to {max_dim} trial unknowns (got {dim_U0})")
    deg = max(system.config.k_int, system.config.k_test)
    G_V = h1_gram(system.space_V, system.mesh_h, precision=2 * deg)[system.test_nodes][:, system.test_nodes]
    lam_min, lam_max = _gamma_gram_extremes(system.gamma, G_V)
    c_h, C_h = float(np.sqrt(lam_min)), float(np.sqrt(lam_max))
    if dim_U0 > dim_V:
        return InfSupReport(0.0, c_h, C_h, dim_U0, dim_V)
    G_U = h1_gram(system.space_U, system.mesh_h, system.mesh_h.parent_map, precision=2 * deg)
    G_U = G_U[free_U][:, free_U].toarray()
    A = system.A_lin[:, free_U].tocsc()
    S = A.T @ spla.splu(G_V.tocsc()).solve(A.toarray())
    S = 0.5 * (S + S.T)
    lam = sla.eigh(S, G_U, eigvals_only=True, subset_by_index=[0, 0])
    alpha = float(np.sqrt(max(lam[0], 0.0)))
    return InfSupReport(alpha, c_h, C_h, dim_U0, dim_V)


def dump_system(system: AssembledSystem, path) -> None:
    """Write ``A_lin`` as ``i j value`` triplets followed by ``b``."""
    A = system.A_lin.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# A {A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {float(v)!r}\n")
        fh.write(f"# b {len(system.b)}\n")
        for v in system.b:
            fh.write(f"{float(v)!r}\n")
