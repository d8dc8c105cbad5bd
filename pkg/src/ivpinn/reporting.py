"""Error measurement, rate fitting and CSV output."""
from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembly import AssembledSystem, DiscretizationConfig, assemble_system, compute_residuals, solve_petrov_galerkin
from .fem import FeSpace, InterpolationMatrices, build_interpolation_matrices, build_space
from .lifting import ScalarField
from .mesh import Mesh, meshsize, refine_nested
from .quadrature import map_rule, reference_rule


@dataclass(frozen=True, eq=False)
class MeasurementRule:
    """Interpolation matrices of ``U_H`` at the points of a measurement rule."""

    matrices: InterpolationMatrices
    weights: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.matrices.points


def measurement_rule(space_U: FeSpace, mesh_h: Mesh, precision: int) -> MeasurementRule:
    """Rule of the given precision on every element of the (nested) fine mesh."""
    pts, wts = map_rule(reference_rule(mesh_h.dim, precision), mesh_h.element_vertices())
    mats = build_interpolation_matrices(space_U, pts, mesh_h.parent_map)
    return MeasurementRule(mats, wts.ravel())


def system_measurement(system: AssembledSystem) -> MeasurementRule:
    """Measurement rule of precision ``q + 2`` on ``T_h``."""
    return measurement_rule(system.space_U, system.mesh_h, system.config.q + 2)


def field_errors(exact: ScalarField, values, grads, points, weights) -> tuple[float, float]:
    """``(H1, L2)`` errors of a field sampled at quadrature points."""
    du = exact(points) - values
    dg = exact.grad(points) - grads
    l2 = float(weights @ (du * du))
    semi = float(weights @ np.sum(dg * dg, axis=1))
    return np.sqrt(l2 + semi), np.sqrt(l2)


def _discrete(u_nodes, rule: MeasurementRule):
    m = rule.matrices
    return m.M @ u_nodes, np.column_stack([g @ u_nodes for g in m.grads])


def h1_error(exact: ScalarField, u_nodes, rule: MeasurementRule) -> float:
    values, grads = _discrete(u_nodes, rule)
    return field_errors(exact, values, grads, rule.points, rule.weights)[0]


def l2_error(exact: ScalarField, u_nodes, rule: MeasurementRule) -> float:
    values, grads = _discrete(u_nodes, rule)
    return field_errors(exact, values, grads, rule.points, rule.weights)[1]


def h1_norm(u_nodes, rule: MeasurementRule) -> float:
    values, grads = _discrete(u_nodes, rule)
    return float(np.sqrt(rule.weights @ (values * values + np.sum(grads * grads, axis=1))))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    dropped: int

    @property
    def defined(self) -> bool:
        return bool(np.isfinite(self.slope))


def fit_rate(h, errors, trim: int = 2, floor: float = 0.0) -> RateFit:
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    Up to ``trim`` points are dropped from the coarse end (largest ``h``),
    choosing the count with the best coefficient of determination.  At least
    three points must survive.  When every error is at or below ``floor`` the
    slope is undefined and returned as NaN.
    """
    h = np.asarray(h, dtype=float)
    e = np.asarray(errors, dtype=float)
    if h.shape != e.shape or len(h) < 3:
        raise ValueError("need at least three (h, error) pairs")
    if np.all(e <= floor):
        return RateFit(np.nan, np.nan, np.nan, 0)
    if np.any(e <= 0) or np.any(h <= 0):
        raise ValueError("errors and mesh sizes must be positive")
    order = np.argsort(-h)
    lh, le = np.log(h[order]), np.log(e[order])
    best = None
    for drop in range(0, min(trim, len(h) - 3) + 1):
        x, y = lh[drop:], le[drop:]
        slope, intercept = np.polyfit(x, y, 1)
        resid = y - (slope * x + intercept)
        ss = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
        if best is None or r2 > best.r2 + 1e-12:
            best = RateFit(float(slope), float(intercept), float(r2), drop)
    return best


@dataclass
class ConvergenceRow:
    H: float
    h: float
    n_inputs: int
    h1_error: float
    l2_error: float
    final_loss: float
    wall_time: float
    seed: int | None = None


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    trim: int = 2

    def add(self, row: ConvergenceRow) -> None:
        self.rows.append(row)
        self.rows.sort(key=lambda r: -r.H)

    @property
    def rate(self) -> RateFit | None:
        if len(self.rows) < 3:
            return None
        return fit_rate([r.H for r in self.rows], [r.h1_error for r in self.rows], self.trim, floor=1e-12)

    def to_csv(self, path) -> None:
        names = list(ConvergenceRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for key, value in self.config.items():
                fh.write(f"# {key} = {value}\n")
            rate = self.rate
            if rate is not None:
                fh.write(f"# rate = {rate.slope!r} (dropped {rate.dropped}, r2 {rate.r2:.6f})\n")
            writer.writerow(names)
            for r in self.rows:
                writer.writerow([_fmt(v) for v in asdict(r).values()])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def csv_name(case: str, config: DiscretizationConfig) -> str:
    return f"{case}_{config.k_test}_{config.q}.csv"


def interpolant_oracle_study(case, config: DiscretizationConfig, nxs) -> ConvergenceRecord:
    """Errors of the nodal interpolant ``I_H u`` on a sequence of coarse meshes; no training."""
    record = ConvergenceRecord(config={"case": case.name, "mode": "oracle-interp",
                                       "k_test": config.k_test, "q": config.q, "k_int": config.k_int})
    for nx in nxs:
        t0 = time.perf_counter()
        mesh_H = case.problem.build_mesh(nx)
        mesh_h = refine_nested(mesh_H, config.k_int)
        space = build_space(mesh_H, config.k_int)
        rule = measurement_rule(space, mesh_h, config.q + 2)
        u_nodes = case.exact(space.nodes)
        values, grads = _discrete(u_nodes, rule)
        e1, e0 = field_errors(case.exact, values, grads, rule.points, rule.weights)
        record.add(ConvergenceRow(meshsize(mesh_H), meshsize(mesh_h), space.n_nodes, e1, e0, float("nan"),
                                  time.perf_counter() - t0))
    return record


def petrov_galerkin_study(case, config: DiscretizationConfig, nxs) -> ConvergenceRecord:
    """Errors of the direct solution of the assembled linear system on a mesh sequence."""
    record = ConvergenceRecord(config={"case": case.name, "mode": "petrov-galerkin",
                                       "k_test": config.k_test, "q": config.q, "k_int": config.k_int})
    for nx in nxs:
        t0 = time.perf_counter()
        system = assemble_system(case.problem, config, case.problem.build_mesh(nx))
        u = solve_petrov_galerkin(system)
        loss = compute_residuals(system, u)[1]
        rule = system_measurement(system)
        values, grads = _discrete(u, rule)
        e1, e0 = field_errors(case.exact, values, grads, rule.points, rule.weights)
        record.add(ConvergenceRow(meshsize(system.mesh_H), meshsize(system.mesh_h), system.n_nodes, e1, e0, loss,
                                  time.perf_counter() - t0))
    return record
