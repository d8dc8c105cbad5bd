"""Registry of manufactured test problems.

Each case carries closed-form coefficients, data and the exact solution with
its gradient.  The source terms are derived by hand; :func:`check_consistency`
re-applies the differential operator with finite differences and is run the
first time a case is fetched from the registry, so a derivation slip cannot go
unnoticed.

New cases are added by writing a ``case_*`` factory that returns a
:class:`TestCase` and listing it in ``_FACTORIES``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .assembly import ProblemDefinition
from .lifting import ScalarField, coons_lifting, zero_field
from .mesh import DIRICHLET, NEUMANN

FD_TOL = 1e-6


class ManufacturedDataError(AssertionError):
    pass


@dataclass(frozen=True, eq=False)
class TestCase:
    __test__ = False   # not a pytest class

    name: str
    problem: ProblemDefinition
    exact: ScalarField
    expected_rate: float | None = None
    study: str = ""                 # which experiment the case feeds
    singular_point: tuple | None = None
    metadata: dict = field(default_factory=dict)


def _cols(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return x[:, 0], x[:, 1]


# -- smooth case --------------------------------------------------------------

def _sin_cos_term(a, ax, ay, axx, ayy, b, bx, by):
    """Value, gradient and Laplacian of ``sin(a) cos(b)`` with ``b`` affine."""
    sa, ca, sb, cb = np.sin(a), np.cos(a), np.sin(b), np.cos(b)
    val = sa * cb
    gx = ca * cb * ax - sa * sb * bx
    gy = ca * cb * ay - sa * sb * by
    lap = (-sa * cb * (ax * ax + ay * ay) - 2 * ca * sb * (ax * bx + ay * by)
           - sa * cb * (bx * bx + by * by) + ca * cb * (axx + ayy))
    return val, gx, gy, lap


def _smooth_u(x):
    X, Y = _cols(x)
    one = np.ones_like(X)
    t1 = _sin_cos_term(3.2 * X * (X - Y), 3.2 * (2 * X - Y), -3.2 * X, 6.4 * one, 0.0 * one,
                       4.3 * Y + X, 1.0, 4.3)
    t2 = _sin_cos_term(4.6 * (X + 2 * Y), 4.6 * one, 9.2 * one, 0.0, 0.0,
                       2.6 * (Y - 2 * X), -5.2, 2.6)
    return tuple(p + q for p, q in zip(t1, t2))


def case_smooth() -> TestCase:
    """Smooth solution with variable coefficients and Neumann data on ``y = 0, 1``."""
    def u_val(x):
        return _smooth_u(x)[0]

    def u_grad(x):
        _, gx, gy, _ = _smooth_u(x)
        return np.column_stack([gx, gy])

    def mu(x):
        X, Y = _cols(x)
        return 2.0 + np.sin(X + 2 * Y)

    def beta(x):
        X, Y = _cols(x)
        return np.column_stack([np.sqrt(X - Y * Y + 5.0), np.sqrt(Y - X * X + 5.0)])

    def sigma(x):
        X, Y = _cols(x)
        return np.exp(X / 2 - Y / 3) + 2.0

    def f(x):
        X, Y = _cols(x)
        u, gx, gy, lap = _smooth_u(x)
        c = np.cos(X + 2 * Y)
        b = beta(x)
        return -mu(x) * lap - c * (gx + 2 * gy) + b[:, 0] * gx + b[:, 1] * gy + sigma(x) * u

    def psi(x, normals):
        return mu(x) * np.einsum("nd,nd->n", u_grad(x), np.atleast_2d(normals))

    exact = ScalarField(u_val, u_grad)
    problem = ProblemDefinition(
        dim=2, mu=mu, beta=beta, sigma=sigma, f=f, psi=psi,
        ubar=coons_lifting(exact, sides=("left", "right")),
        boundary={"bottom": NEUMANN, "top": NEUMANN, "left": DIRICHLET, "right": DIRICHLET},
        mu0=0.5)
    return TestCase("smooth", problem, exact, expected_rate=None, study="convergence, mixed boundary conditions")


# -- corner singularity ---------------------------------------------------------

def _corner_parts(x):
    X, Y = _cols(x)
    r = np.hypot(X, Y)
    th = np.arctan2(Y, X)
    phase = 2.0 / 3.0 * (th + np.pi / 2)
    return X, Y, r, th, phase


def case_corner_singularity() -> TestCase:
    """``r^(2/3) sin(2/3 (theta + pi/2))`` anchored at the origin, all-Dirichlet."""
    def u_val(x):
        _, _, r, _, phase = _corner_parts(x)
        return r ** (2.0 / 3.0) * np.sin(phase)

    def u_grad(x):
        _, _, r, th, phase = _corner_parts(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            ur = 2.0 / 3.0 * r ** (-1.0 / 3.0) * np.sin(phase)
            ut_over_r = 2.0 / 3.0 * r ** (-1.0 / 3.0) * np.cos(phase)
            g = np.column_stack([ur * np.cos(th) - ut_over_r * np.sin(th),
                                 ur * np.sin(th) + ut_over_r * np.cos(th)])
        g[r == 0] = np.inf    # unbounded gradient at the corner
        return g

    def f(x):
        g = u_grad(x)
        return 2.0 * g[:, 0] + 3.0 * g[:, 1] + 4.0 * u_val(x)

    exact = ScalarField(u_val, u_grad)
    problem = ProblemDefinition(
        dim=2, mu=lambda x: np.ones(len(np.atleast_2d(x))),
        beta=lambda x: np.tile([2.0, 3.0], (len(np.atleast_2d(x)), 1)),
        sigma=lambda x: np.full(len(np.atleast_2d(x)), 4.0), f=f, ubar=exact, mu0=0.5)
    return TestCase("corner", problem, exact, expected_rate=2.0 / 3.0, study="convergence, corner singularity",
                    singular_point=(0.0, 0.0))


# -- zero data ----------------------------------------------------------------

def case_zero_data(dim: int = 1) -> TestCase:
    """``-Laplace u = 0`` with homogeneous Dirichlet data; the exact solution is 0."""
    if dim not in (1, 2):
        raise ValueError("dim must be 1 or 2")
    zeros = lambda x: np.zeros(len(np.atleast_2d(x)))
    problem = ProblemDefinition(
        dim=dim, mu=lambda x: np.ones(len(np.atleast_2d(x))),
        beta=lambda x: np.zeros((len(np.atleast_2d(x)), dim)),
        sigma=zeros, f=zeros, ubar=zero_field(dim),
        domain=(0.0, 1.0) if dim == 1 else ((0.0, 1.0), (0.0, 1.0)), mu0=0.5)
    return TestCase(f"zero{dim}d", problem, zero_field(dim), study="zero-data stability")


# -- parametric nonlinear family -------------------------------------------------

P_RANGE = (0.5, 2.0)
N_TRAIN_P = 13


def training_parameters(n: int = N_TRAIN_P) -> np.ndarray:
    return np.linspace(*P_RANGE, n)


def _param_parts(x, p):
    X, Y = _cols(x)
    s = X + Y / 2
    th = 5.0 * (p * X + Y / 2)
    return X, Y, s, th


@dataclass(frozen=True, eq=False)
class ParametricFamily:
    """Nonlinear family ``-Laplace u + (2, 3) . grad u + 4 exp(-p u^2) = f(p)``."""

    name: str = "parametric"
    p_range: tuple = P_RANGE

    def training_values(self, n: int = N_TRAIN_P) -> np.ndarray:
        return training_parameters(n)

    def at(self, p: float) -> TestCase:
        p = float(p)
        lo, hi = self.p_range
        if not lo <= p <= hi:
            warnings.warn(f"p = {p} lies outside [{lo}, {hi}]: extrapolating", stacklevel=2)

        def u_val(x):
            _, _, s, th = _param_parts(x, p)
            return np.cos(th) / (1 + p) + s * s

        def u_grad(x):
            _, _, s, th = _param_parts(x, p)
            sn = np.sin(th) / (1 + p)
            return np.column_stack([-5 * p * sn + 2 * s, -2.5 * sn + s])

        def f(x):
            _, _, s, th = _param_parts(x, p)
            cs = np.cos(th) / (1 + p)
            lap = -25 * p * p * cs + 2 - 6.25 * cs + 0.5
            g = u_grad(x)
            u = u_val(x)
            return -lap + 2 * g[:, 0] + 3 * g[:, 1] + 4 * np.exp(-p * u * u)

        exact = ScalarField(u_val, u_grad)
        problem = ProblemDefinition(
            dim=2, mu=lambda x: np.ones(len(np.atleast_2d(x))),
            beta=lambda x: np.tile([2.0, 3.0], (len(np.atleast_2d(x)), 1)),
            sigma=lambda x: np.full(len(np.atleast_2d(x)), 4.0), f=f,
            ubar=coons_lifting(exact), nonlinear_p=p, mu0=0.5)
        return TestCase(f"parametric[p={p:g}]", problem, exact, study="parametric nonlinear generalization", metadata={"p": p})


def case_parametric_nonlinear() -> ParametricFamily:
    return ParametricFamily()


# -- finite-difference guards ---------------------------------------------------

def apply_operator_fd(problem: ProblemDefinition, u: Callable, x, h: float = 1e-3) -> np.ndarray:
    """``L u`` by Richardson-extrapolated central differences (fourth order)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))

    def once(h):
        out = np.zeros(len(x))
        u0 = u(x)
        beta = np.asarray(problem.beta(x)).reshape(len(x), -1)
        for d in range(problem.dim):
            e = np.zeros(problem.dim)
            e[d] = h
            up, um = u(x + e), u(x - e)
            flux = problem.mu(x + e / 2) * (up - u0) - problem.mu(x - e / 2) * (u0 - um)
            out += -flux / h**2 + beta[:, d] * (up - um) / (2 * h)
        return out

    Lu = (4 * once(h / 2) - once(h)) / 3
    u0 = u(x)
    if problem.nonlinear_p is None:
        return Lu + problem.sigma(x) * u0
    return Lu + problem.sigma(x) * np.exp(-problem.nonlinear_p * u0 * u0)


def _interior_points(case: TestCase, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0.05, 0.95, size=(n, case.problem.dim))
    return pts


def check_consistency(case: TestCase, n: int = 100, seed: int = 0, tol: float = FD_TOL) -> float:
    """Largest scaled mismatch between the stored ``f`` and a finite-difference ``L u``.

    Also compares the closed-form gradient with differences of ``u``.  Raises
    :class:`ManufacturedDataError` when either exceeds ``tol``.
    """
    x = _interior_points(case, n, seed)
    f = case.problem.f(x)
    Lu = apply_operator_fd(case.problem, case.exact, x)
    err_f = np.max(np.abs(Lu - f) / np.maximum(1.0, np.abs(f)))
    g = case.exact.grad(x)
    err_g = 0.0
    for d in range(case.problem.dim):
        e = np.zeros(case.problem.dim)
        h = 1e-3
        e[d] = h
        d1 = (case.exact(x + e) - case.exact(x - e)) / (2 * h)
        d2 = (case.exact(x + e / 2) - case.exact(x - e / 2)) / h
        fd = (4 * d2 - d1) / 3
        err_g = max(err_g, np.max(np.abs(fd - g[:, d]) / np.maximum(1.0, np.abs(g[:, d]))))
    worst = max(err_f, err_g)
    if not worst <= tol:
        raise ManufacturedDataError(f"{case.name}: manufactured data inconsistent "
                                    f"(operator {err_f:.2e}, gradient {err_g:.2e})")
    return float(worst)


_FACTORIES = {
    "smooth": case_smooth,
    "corner": case_corner_singularity,
    "zero1d": lambda: case_zero_data(1),
    "zero2d": lambda: case_zero_data(2),
}


def list_cases() -> list[str]:
    return sorted(_FACTORIES) + ["parametric"]


@lru_cache(maxsize=None)
def _checked(name: str) -> TestCase:
    case = _FACTORIES[name]()
    check_consistency(case)
    return case


def get_case(name: str, p: float | None = None) -> TestCase:
    """Fetch a registered case, running its consistency check on first use.

    The parametric family needs ``p``.
    """
    if name == "parametric":
        if p is None:
            raise ValueError("the parametric family needs a value of p")
        case = case_parametric_nonlinear().at(p)
        check_consistency(case)
        return case
    if name not in _FACTORIES:
        raise KeyError(f"unknown case {name!r}; available: {', '.join(list_cases())}")
    return _checked(name)
