import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ivpinn.fem import build_interpolation_matrices, build_space, eval_basis, interpolation_matrices_at
from ivpinn.mesh import DIRICHLET, NEUMANN, build_interval_mesh, build_structured_mesh, lattice_indices, refine_nested
from ivpinn.quadrature import map_rule, reference_rule


def fine_points(mesh_H, k, q=5):
    fine = refine_nested(mesh_H, k)
    pts, _ = map_rule(reference_rule(mesh_H.dim, q), fine.element_vertices())
    return fine, pts


@pytest.mark.parametrize("k,n", [(1, 4), (2, 9), (3, 16), (4, 25)])
def test_node_counts(k, n):
    assert build_space(build_structured_mesh(1), k).n_nodes == n


def test_dirichlet_mask():
    assert build_space(build_structured_mesh(1), 1).dirichlet_mask.all()
    spec = {"left": DIRICHLET, "right": DIRICHLET, "bottom": NEUMANN, "top": NEUMANN}
    space = build_space(build_structured_mesh(2, boundary_spec=spec), 2)
    x = space.nodes[:, 0]
    np.testing.assert_array_equal(space.dirichlet_mask, np.isclose(x, 0) | np.isclose(x, 1))


def test_shared_nodes_unique():
    space = build_space(build_structured_mesh(3, 2), 4)
    uniq = np.unique(np.round(space.nodes, 12), axis=0)
    assert len(uniq) == space.n_nodes
    # connectivity points at the right coordinates
    mesh = space.mesh
    lat = lattice_indices(4, 2) / 4
    v = mesh.element_vertices()
    expect = v[:, :1] + lat[None, :, :1] * (v[:, 1:2] - v[:, :1]) + lat[None, :, 1:] * (v[:, 2:] - v[:, :1])
    np.testing.assert_allclose(space.nodes[space.element_nodes], expect, atol=1e-14)


def test_basis_properties():
    vals, grads = eval_basis(1, [[1 / 3, 1 / 3]])
    np.testing.assert_allclose(vals, [[1 / 3] * 3])
    for k in range(1, 7):
        nodes = lattice_indices(k, 2) / k
        vals, grads = eval_basis(k, nodes)
        np.testing.assert_allclose(vals, np.eye(len(nodes)), atol=1e-11)
        rng = np.random.default_rng(k)
        pts = rng.dirichlet([1, 1, 1], 20)[:, :2]
        vals, grads = eval_basis(k, pts)
        np.testing.assert_allclose(vals.sum(axis=1), 1, atol=1e-12)
        np.testing.assert_allclose(grads.sum(axis=1), 0, atol=1e-10)


def test_degree_four_reproduces_quartic():
    nodes = lattice_indices(4, 2) / 4
    pts = np.random.default_rng(0).dirichlet([1, 1, 1], 30)[:, :2]
    vals, _ = eval_basis(4, pts)
    np.testing.assert_allclose(vals @ nodes[:, 0] ** 4, pts[:, 0] ** 4, atol=1e-11)


def test_constant_and_linear_fields():
    mesh = build_structured_mesh(3)
    space = build_space(mesh, 4)
    fine, pts = fine_points(mesh, 4)
    mats = build_interpolation_matrices(space, pts, fine.parent_map)
    ones = np.ones(space.n_nodes)
    np.testing.assert_allclose(mats.M @ ones, 1, atol=1e-12)
    np.testing.assert_allclose(mats.M_dx @ ones, 0, atol=1e-10)
    np.testing.assert_allclose(mats.M_dy @ ones, 0, atol=1e-10)
    x = space.nodes[:, 0]
    np.testing.assert_allclose(mats.M_dx @ x, 1, atol=1e-10)
    np.testing.assert_allclose(mats.M_dy @ x, 0, atol=1e-10)
    assert np.all(np.diff(mats.M.indptr) == 15)


@settings(max_examples=15, deadline=None)
@given(k=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_polynomial_exactness(k, seed):
    rng = np.random.default_rng(seed)
    coef = rng.normal(size=(k + 1, k + 1))
    P = lambda x, y: sum(coef[a, b] * x**a * y**b for a in range(k + 1) for b in range(k + 1 - a))
    Px = lambda x, y: sum(a * coef[a, b] * x ** (a - 1) * y**b for a in range(1, k + 1) for b in range(k + 1 - a))
    Py = lambda x, y: sum(b * coef[a, b] * x**a * y ** (b - 1) for a in range(k + 1) for b in range(1, k + 1 - a))
    mesh = build_structured_mesh(2, 3, domain=((0, 1), (0, 2)))
    space = build_space(mesh, k)
    fine, pts = fine_points(mesh, k)
    mats = build_interpolation_matrices(space, pts, fine.parent_map)
    v = P(*space.nodes.T)
    X, Y = mats.points.T
    scale = max(1.0, np.abs(P(X, Y)).max())
    np.testing.assert_allclose(mats.M @ v, P(X, Y), atol=1e-10 * scale)
    np.testing.assert_allclose(mats.M_dx @ v, Px(X, Y), atol=1e-9 * scale)
    np.testing.assert_allclose(mats.M_dy @ v, Py(X, Y), atol=1e-9 * scale)


def test_interval_space():
    mesh = build_interval_mesh(3)
    space = build_space(mesh, 4)
    fine, pts = fine_points(mesh, 4)
    mats = build_interpolation_matrices(space, pts, fine.parent_map)
    x = space.nodes[:, 0]
    np.testing.assert_allclose(mats.M @ x**4, mats.points[:, 0] ** 4, atol=1e-12)
    np.testing.assert_allclose(mats.M_dx @ x**4, 4 * mats.points[:, 0] ** 3, atol=1e-10)
    assert space.dirichlet_mask.sum() == 2


def test_broken_nesting_detected():
    mesh = build_structured_mesh(2)
    space = build_space(mesh, 2)
    with pytest.raises(ValueError, match="nesting"):
        interpolation_matrices_at(space, np.array([[0.9, 0.9]]), np.array([0]))
