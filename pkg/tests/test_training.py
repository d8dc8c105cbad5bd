import numpy as np
import pytest
from scipy.spatial import cKDTree

import ivpinn.network as network
from ivpinn.assembly import DiscretizationConfig, assemble_system, solve_petrov_galerkin
from ivpinn.lifting import BoundaryLifting, ScalarField
from ivpinn.network import MlpNetwork, init_weights
from ivpinn.problems import case_parametric_nonlinear, get_case
from ivpinn.training import (TrainingConfig, TrainingDiverged, interpolated_objective, noninterpolated_objective,
                             optimize, parametric_objective, train_ivpinn, train_parametric, train_vpinn_noninterp)

CFG = DiscretizationConfig(1, 3)
QUICK = TrainingConfig(adam_epochs=20, max_iter=30)


def smooth_system(nx=2):
    case = get_case("smooth")
    return case, assemble_system(case.problem, CFG, case.problem.build_mesh(nx)), case.problem.lifting()


def fd_directional(objective, theta, seed=0, h=1e-5):
    d = np.random.default_rng(seed).normal(size=theta.size)
    d /= np.linalg.norm(d)
    fd = (objective(theta + h * d)[0] - objective(theta - h * d)[0]) / (2 * h)
    return objective(theta)[1] @ d, fd


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(c1=0.9, c2=0.1)
    with pytest.raises(ValueError):
        TrainingConfig(second_order="newton")
    cfg = TrainingConfig()
    assert cfg.learning_rate(0) == 1e-3
    assert cfg.learning_rate(1000) == pytest.approx(5e-4)
    assert cfg.learning_rate(2500) == pytest.approx(1e-3 * 0.5**2.5)


def test_zero_data_zero_net_has_zero_loss():
    case = get_case("zero2d")
    s = assemble_system(case.problem, CFG, case.problem.build_mesh(2))
    net = init_weights([2, 5, 1], 0)
    net = net.with_flat(np.zeros(net.n_params))
    loss, grad = interpolated_objective(s, case.problem.lifting(), net)(net.flat())
    assert loss == 0 and not np.any(grad)


def test_oracle_nodal_values_give_machine_zero_loss():
    case, s, lift = smooth_system(3)
    sol = solve_petrov_galerkin(s, lift)
    tree = cKDTree(s.nodes)
    lookup = ScalarField(lambda x: sol[tree.query(x)[1]], None)
    net = init_weights([2, 4, 1], 0)
    net = net.with_flat(np.zeros(net.n_params))
    loss, _ = interpolated_objective(s, BoundaryLifting(lift.phi, lookup), net)(net.flat())
    assert loss <= 1e-20


@pytest.mark.parametrize("kind", ["interpolated", "noninterpolated"])
def test_objective_gradients_fd(kind):
    case, s, lift = smooth_system(2)
    net = init_weights([2, 6, 6, 1], 1)
    obj = (interpolated_objective if kind == "interpolated" else noninterpolated_objective)(s, lift, net)
    for seed in range(3):
        an, fd = fd_directional(obj, net.flat(), seed)
        assert an == pytest.approx(fd, rel=1e-5)


def test_nonlinear_noninterpolated_gradient_fd():
    case = case_parametric_nonlinear().at(1.3)
    s = assemble_system(case.problem, CFG, case.problem.build_mesh(2))
    net = init_weights([2, 5, 1], 2)
    obj = noninterpolated_objective(s, case.problem.lifting(), net)
    an, fd = fd_directional(obj, net.flat())
    assert an == pytest.approx(fd, rel=1e-5)


def test_parametric_single_value_matches_interpolated():
    case = case_parametric_nonlinear().at(1.25)
    s = assemble_system(case.problem, CFG, case.problem.build_mesh(2))
    lift = case.problem.lifting()
    net3 = init_weights([3, 5, 5, 1], 3)
    A0 = net3.weights[0]
    net2 = MlpNetwork([A0[:, :2].copy()] + net3.weights[1:], [net3.biases[0] + A0[:, 2] * 1.25] + net3.biases[1:])
    l3, g3 = parametric_objective([s], [lift], [1.25], net3)(net3.flat())
    l2, g2 = interpolated_objective(s, lift, net2)(net2.flat())
    assert l3 == pytest.approx(l2, rel=1e-13)
    # the first-layer x, y weights share gradients
    np.testing.assert_allclose(g3[:15].reshape(5, 3)[:, :2], g2[:10].reshape(5, 2), rtol=1e-12)
    assert an_fd_ok(parametric_objective([s], [lift], [1.25], net3), net3.flat())


def an_fd_ok(obj, theta):
    an, fd = fd_directional(obj, theta)
    return abs(an - fd) <= 1e-5 * max(abs(fd), 1e-8)


def test_interpolated_path_never_differentiates_in_space(monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("spatial derivative of the network requested")

    for name in ("mlp_input_jacobian", "mlp_value_and_jacobian", "mlp_jacobian_weight_gradient"):
        monkeypatch.setattr(network, name, forbidden)
    case, s, lift = smooth_system(2)
    relu = init_weights([2, 8, 1], 0, activation="relu")
    net, hist = train_ivpinn(s, lift, relu, QUICK)
    assert hist.final_loss <= hist.initial_loss


def test_training_is_deterministic_and_decreasing():
    case, s, lift = smooth_system(2)
    runs = [train_ivpinn(s, lift, init_weights([2, 8, 8, 1], 7), QUICK) for _ in range(2)]
    np.testing.assert_array_equal(runs[0][1].losses, runs[1][1].losses)
    np.testing.assert_array_equal(runs[0][0].flat(), runs[1][0].flat())
    hist = runs[0][1]
    assert hist.final_loss <= hist.initial_loss
    assert len(hist.losses[hist.phase_slice("adam")]) == 20
    bfgs = np.array(hist.losses[hist.phase_slice("bfgs")])
    assert np.all(np.diff(bfgs) <= 0)
    assert hist.wolfe and all(hist.wolfe)


def test_lbfgs_and_memory():
    case, s, lift = smooth_system(2)
    net, hist = train_ivpinn(s, lift, init_weights([2, 8, 1], 0), TrainingConfig(adam_epochs=5, second_order="lbfgs",
                                                                                 max_iter=40, memory=5))
    lb = np.array(hist.losses[hist.phase_slice("lbfgs")])
    assert len(lb) > 1 and np.all(np.diff(lb) <= 0)


def test_dense_bfgs_threshold_switches_to_limited_memory():
    case, s, lift = smooth_system(2)
    _, hist = train_ivpinn(s, lift, init_weights([2, 8, 1], 0),
                           TrainingConfig(adam_epochs=0, max_iter=5, dense_bfgs_max_params=10))
    assert set(hist.phases) == {"lbfgs"}


def test_quadratic_converges_to_gradient_tolerance():
    target = np.arange(5.0)
    template = MlpNetwork([np.zeros((1, 4))], [np.zeros(1)])
    obj = lambda t: (float(np.sum((t - target) ** 2)), 2 * (t - target))
    net, hist = optimize(obj, template, TrainingConfig(adam_epochs=0, max_iter=100))
    np.testing.assert_allclose(net.flat(), target, atol=1e-8)
    assert len(hist) < 20


def test_divergence_returns_last_good_network():
    calls = {"n": 0}

    def obj(t):
        calls["n"] += 1
        loss = np.sum(t * t) if calls["n"] <= 5 else np.nan
        return loss, 2 * t

    template = init_weights([1, 2, 1], 0)
    with pytest.raises(TrainingDiverged) as info:
        optimize(obj, template, TrainingConfig(adam_epochs=10, second_order="none"))
    err = info.value
    assert len(err.history) == 5
    assert np.all(np.isfinite(err.net.flat()))


def test_checkpoints_monitor_and_csv(tmp_path):
    case, s, lift = smooth_system(2)
    cfg = TrainingConfig(adam_epochs=12, max_iter=0, checkpoint_every=5, checkpoint_dir=str(tmp_path / "ck"),
                         monitor_every=4)
    net, hist = train_ivpinn(s, lift, init_weights([2, 4, 1], 0), cfg, monitor=lambda n: 1.5)
    names = sorted(p.name for p in (tmp_path / "ck").iterdir())
    assert names == ["epoch_000000.bin", "epoch_000005.bin", "epoch_000010.bin"]
    assert network.load_checkpoint(tmp_path / "ck" / "epoch_000010.bin").widths == [2, 4, 1]
    assert [e for e, h in zip(hist.epochs, hist.h1_errors) if h is not None] == [0, 4, 8, 12]
    hist.to_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,phase,elapsed_seconds,h1_error"
    assert len(lines) == len(hist) + 1


def test_input_dimension_checked():
    case, s, lift = smooth_system(2)
    with pytest.raises(ValueError, match="dimension"):
        train_ivpinn(s, lift, init_weights([3, 4, 1], 0), QUICK)
    with pytest.raises(ValueError):
        train_vpinn_noninterp(case.problem, CFG, s.mesh_H, init_weights([2, 4, 1], 0, activation="relu"), QUICK)


def test_noninterpolated_and_parametric_training_decrease():
    case, s, lift = smooth_system(2)
    _, h = train_vpinn_noninterp(case.problem, CFG, s.mesh_H, init_weights([2, 6, 1], 0), QUICK, system=s)
    assert h.final_loss < h.initial_loss
    fam = case_parametric_nonlinear()
    ps = [0.5, 1.0]
    systems = [assemble_system(fam.at(p).problem, CFG, fam.at(p).problem.build_mesh(2)) for p in ps]
    _, h = train_parametric(systems, [fam.at(p).problem.lifting() for p in ps], ps, init_weights([3, 6, 1], 0), QUICK)
    assert h.final_loss < h.initial_loss
