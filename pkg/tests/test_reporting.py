import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivpinn.assembly import DiscretizationConfig
from ivpinn.fem import build_space
from ivpinn.lifting import ScalarField
from ivpinn.mesh import build_structured_mesh, refine_nested
from ivpinn.problems import get_case
from ivpinn.reporting import (ConvergenceRecord, ConvergenceRow, csv_name, fit_rate, h1_error, h1_norm,
                              interpolant_oracle_study, l2_error, measurement_rule, petrov_galerkin_study)

X2 = ScalarField(lambda x: x[:, 0] ** 2, lambda x: np.column_stack([2 * x[:, 0], 0 * x[:, 0]]))


def rule_for(mesh, k, s=None, precision=8):
    space = build_space(mesh, k)
    return space, measurement_rule(space, refine_nested(mesh, s or k), precision)


def test_p1_interpolation_error_of_x_squared():
    # the P1 interpolant of x^2 on the two-triangle square is x
    space, rule = rule_for(build_structured_mesh(1), 1, s=1)
    u = X2(space.nodes)
    np.testing.assert_allclose(u, space.nodes[:, 0])
    assert h1_error(X2, u, rule) == pytest.approx(np.sqrt(1 / 30 + 1 / 3), rel=1e-13)
    assert l2_error(X2, u, rule) == pytest.approx(np.sqrt(1 / 30), rel=1e-13)


def test_exact_reproduction_and_identity():
    space, rule = rule_for(build_structured_mesh(3), 4)
    poly = ScalarField(lambda x: x[:, 0] ** 4 - x[:, 0] * x[:, 1] ** 3,
                       lambda x: np.column_stack([4 * x[:, 0] ** 3 - x[:, 1] ** 3, -3 * x[:, 0] * x[:, 1] ** 2]))
    assert h1_error(poly, poly(space.nodes), rule) <= 1e-10
    # identical fields: the "exact" field is the discrete one itself
    zero = ScalarField(lambda x: np.zeros(len(x)), lambda x: np.zeros((len(x), 2)))
    assert h1_error(zero, np.zeros(space.n_nodes), rule) == 0
    assert h1_norm(np.ones(space.n_nodes), rule) == pytest.approx(1.0, rel=1e-13)


def test_fit_rate_exact_power_law():
    h = np.array([0.5, 0.25, 0.125, 0.0625])
    assert fit_rate(h, 3.0 * h**2).slope == pytest.approx(2.0, abs=1e-12)


def test_fit_rate_trims_plateau():
    h = 2.0 ** -np.arange(1, 7)
    err = 0.1 * h**4
    err[:2] = 1e-2           # pre-asymptotic plateau
    fit = fit_rate(h, err, trim=2)
    assert fit.dropped == 2
    assert fit.slope == pytest.approx(4.0, abs=1e-10)
    raw = fit_rate(h, err, trim=0)
    assert abs(raw.slope - 4.0) > 0.3 and raw.r2 < fit.r2


def test_fit_rate_validation():
    with pytest.raises(ValueError):
        fit_rate([0.5, 0.25], [1, 2])
    assert np.isnan(fit_rate([0.5, 0.25, 0.1], [1e-14, 1e-15, 1e-15], floor=1e-12).slope)


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0.5, 7), c=st.floats(1e-3, 1e3), n=st.integers(3, 7))
def test_fit_rate_recovers_any_power(rate, c, n):
    h = 1.0 / np.arange(2, 2 + n)
    assert fit_rate(h, c * h**rate).slope == pytest.approx(rate, abs=1e-9)


def test_convergence_record_csv(tmp_path):
    rec = ConvergenceRecord(config={"case": "x"})
    for H in (0.125, 0.5, 0.25):
        rec.add(ConvergenceRow(H, H / 4, 10, H**2, H**3, 0.0, 0.1))
    assert [r.H for r in rec.rows] == [0.5, 0.25, 0.125]
    assert rec.rate.slope == pytest.approx(2.0)
    rec.to_csv(tmp_path / "r.csv")
    lines = [l for l in (tmp_path / "r.csv").read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "H,h,n_inputs,h1_error,l2_error,final_loss,wall_time,seed"
    assert len(lines) == 4
    assert csv_name("smooth", DiscretizationConfig(1, 3)) == "smooth_1_3.csv"


def test_oracle_study_polynomial_is_exact():
    # the zero case has exact solution 0, which every space reproduces
    rec = interpolant_oracle_study(get_case("zero2d"), DiscretizationConfig(1, 3), [2, 3, 4])
    assert all(r.h1_error <= 1e-9 for r in rec.rows)
    assert not rec.rate.defined
    assert [r.n_inputs for r in rec.rows] == [(4 * n + 1) ** 2 for n in (2, 3, 4)]


def test_oracle_study_smooth_rate():
    rec = interpolant_oracle_study(get_case("smooth"), DiscretizationConfig(1, 3), [4, 6, 8, 12])
    assert 3.7 <= rec.rate.slope <= 4.3


def test_petrov_galerkin_study_corner():
    rec = petrov_galerkin_study(get_case("corner"), DiscretizationConfig(1, 3), [2, 4, 8])
    assert all(r.final_loss < 1e-18 for r in rec.rows)
    assert 0.5 <= fit_rate([r.H for r in rec.rows], [r.h1_error for r in rec.rows], trim=0).slope <= 0.9
