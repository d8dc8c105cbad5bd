"""Loss functions over network weights and the ADAM + quasi-Newton optimizer.

Three objectives share the optimizer:

* interpolated: the network is sampled at the interpolation nodes of ``U_H``,
  lifted pointwise, and the residuals come from the assembled operator;
* non-interpolated: the lifted network and its spatial gradient are evaluated
  directly at the quadrature points;
* parametric: the interpolated loss summed over a set of parameter values,
  with the parameter as an extra network input.
"""
from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import line_search

from .assembly import AssembledSystem, DiscretizationConfig, assemble_system, compute_residuals
from .lifting import BoundaryLifting
from .network import (MlpNetwork, mlp_jacobian_weight_gradient, mlp_value_and_weight_gradient,
                      save_checkpoint)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; carries the last network with a finite loss."""

    def __init__(self, message, net, history):
        super().__init__(message)
        self.net = net
        self.history = history


@dataclass(frozen=True)
class TrainingConfig:
    adam_epochs: int = 3000
    adam_lr0: float = 1e-3
    lr_halving_epochs: float = 1000.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    second_order: str = "bfgs"
    max_iter: int = 2000
    memory: int = 20
    dense_bfgs_max_params: int = 4000   # above this BFGS switches to its limited-memory form
    c1: float = 1e-4
    c2: float = 0.9
    gtol: float = 1e-10
    ftol: float = 1e-15                 # relative decrease counted as stagnation
    stall_iters: int = 20
    seed: int = 0
    checkpoint_every: int = 500
    checkpoint_dir: str | None = None
    monitor_every: int = 100

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("Wolfe constants must satisfy 0 < c1 < c2 < 1")
        if self.adam_lr0 <= 0 or self.lr_halving_epochs <= 0:
            raise ValueError("learning rate and its decay scale must be positive")
        if self.second_order not in ("bfgs", "lbfgs", "none"):
            raise ValueError(f"unknown second-order method {self.second_order!r}")
        if self.adam_epochs < 0 or self.max_iter < 0 or self.memory < 1:
            raise ValueError("iteration counts must be non-negative")

    def learning_rate(self, epoch: int) -> float:
        return self.adam_lr0 * 0.5 ** (epoch / self.lr_halving_epochs)


@dataclass
class TrainingHistory:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    elapsed: list = field(default_factory=list)
    h1_errors: list = field(default_factory=list)
    wolfe: list = field(default_factory=list)   # one flag per accepted quasi-Newton step

    def append(self, epoch, loss, phase, elapsed, h1=None):
        self.epochs.append(epoch)
        self.losses.append(float(loss))
        self.phases.append(phase)
        self.elapsed.append(elapsed)
        self.h1_errors.append(h1)

    def __len__(self):
        return len(self.losses)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def phase_slice(self, phase) -> slice:
        idx = [i for i, p in enumerate(self.phases) if p == phase]
        return slice(idx[0], idx[-1] + 1) if idx else slice(0, 0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "phase", "elapsed_seconds", "h1_error"])
            for row in zip(self.epochs, self.losses, self.phases, self.elapsed, self.h1_errors):
                w.writerow([row[0], repr(row[1]), row[2], f"{row[3]:.6f}", "" if row[4] is None else repr(row[4])])


# -- objectives ----------------------------------------------------------------

def interpolated_objective(system: AssembledSystem, lifting: BoundaryLifting, template: MlpNetwork):
    """``theta -> (loss, gradient)`` for the interpolated loss.

    Only nodal values of the lifted network enter; spatial derivatives come
    from the interpolation matrices inside the assembled operator.
    """
    nodes = system.nodes
    phi = lifting.phi(nodes)
    ubar = lifting.ubar(nodes)

    def cotangent(out):
        _, loss, dloss = compute_residuals(system, ubar + phi * out)
        return loss, phi * dloss

    def objective(theta):
        return mlp_value_and_weight_gradient(template.with_flat(theta), nodes, cotangent)

    return objective


def interpolated_nodal_values(system: AssembledSystem, lifting: BoundaryLifting, net: MlpNetwork) -> np.ndarray:
    """Nodal values of ``B w`` on ``U_H``: the coefficients of the interpolant."""
    nodes = system.nodes
    return lifting.nodal(net(nodes), nodes)


def noninterpolated_objective(system: AssembledSystem, lifting: BoundaryLifting, template: MlpNetwork):
    """``theta -> (loss, gradient)`` with ``B w`` evaluated at the quadrature points."""
    pts, w = system.points, system.weights
    T, Tg = system.test.M, system.test.grads
    dim = pts.shape[1]
    phi, dphi = lifting.phi(pts), lifting.phi.grad(pts)
    ubar, dubar = lifting.ubar(pts), lifting.ubar.grad(pts)
    wmu, wbeta, wsig = w * system.mu_q, w[:, None] * system.beta_q, w * system.sigma_q
    p = system.nonlinear_p

    def cotangent(out, jac):
        v = ubar + phi * out
        G = dubar + phi[:, None] * jac + out[:, None] * dphi
        react = v if p is None else np.exp(-p * v * v)
        ax = T.T @ (np.sum(wbeta * G, axis=1) + wsig * react)
        for d in range(dim):
            ax = ax + Tg[d].T @ (wmu * G[:, d])
        r = system.b - ax
        s = r / system.gamma
        loss = float(r @ s)
        ts = T @ s
        dG = np.column_stack([-2.0 * (wmu * (Tg[d] @ s) + wbeta[:, d] * ts) for d in range(dim)])
        dreact = 1.0 if p is None else -2.0 * p * v * react
        dv = -2.0 * wsig * dreact * ts
        c_out = dv * phi + np.sum(dG * dphi, axis=1)
        return loss, c_out, dG * phi[:, None]

    def objective(theta):
        return mlp_jacobian_weight_gradient(template.with_flat(theta), pts, None, cotangent_fn=cotangent)

    return objective


def parametric_objective(systems, liftings, params, template: MlpNetwork):
    """Interpolated loss summed over parameter values; the network sees ``(x, y, p)``."""
    if not (len(systems) == len(liftings) == len(params)):
        raise ValueError("one system and one lifting per parameter value")
    blocks, phis, ubars = [], [], []
    for system, lifting, p in zip(systems, liftings, params):
        nodes = system.nodes
        blocks.append(np.column_stack([nodes, np.full(len(nodes), float(p))]))
        phis.append(lifting.phi(nodes))
        ubars.append(lifting.ubar(nodes))
    inputs = np.vstack(blocks)
    splits = np.cumsum([len(b) for b in blocks])[:-1]

    def cotangent(out):
        total, cots = 0.0, []
        for system, phi, ubar, o in zip(systems, phis, ubars, np.split(out, splits)):
            _, loss, dloss = compute_residuals(system, ubar + phi * o)
            total += loss
            cots.append(phi * dloss)
        return total, np.concatenate(cots)

    def objective(theta):
        return mlp_value_and_weight_gradient(template.with_flat(theta), inputs, cotangent)

    return objective


# -- optimizer -------------------------------------------------------------------

class _Cached:
    """Memoize the last evaluation so the line search's f and f' calls share work."""

    def __init__(self, objective):
        self.objective = objective
        self.key = None
        self.value = None
        self.n_evals = 0

    def __call__(self, theta):
        key = theta.tobytes()
        if key != self.key:
            loss, grad = self.objective(theta)
            self.key, self.value = key, (float(loss), np.asarray(grad, dtype=float))
            self.n_evals += 1
        return self.value

    def f(self, theta):
        return self.value_at(theta)[0]

    def g(self, theta):
        return self.value_at(theta)[1]

    def value_at(self, theta):
        return self(np.asarray(theta, dtype=float))


class _Run:
    def __init__(self, template, cfg, monitor, history):
        self.template, self.cfg, self.monitor = template, cfg, monitor
        self.history = history if history is not None else TrainingHistory()
        self.t0 = time.perf_counter()
        self.last_good = template.flat().copy()
        self.epoch = len(self.history)

    def record(self, theta, loss, phase):
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {self.epoch} ({phase})",
                                   self.template.with_flat(self.last_good), self.history)
        self.last_good = theta.copy()
        h1 = None
        if self.monitor is not None and self.cfg.monitor_every and self.epoch % self.cfg.monitor_every == 0:
            h1 = float(self.monitor(self.template.with_flat(theta)))
        self.history.append(self.epoch, loss, phase, time.perf_counter() - self.t0, h1)
        if self.cfg.checkpoint_dir and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
            Path(self.cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.template.with_flat(theta), Path(self.cfg.checkpoint_dir) / f"epoch_{self.epoch:06d}.bin")
        self.epoch += 1


def _adam(fg, theta, cfg, run):
    b1, b2 = cfg.adam_betas
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, cfg.adam_epochs + 1):
        loss, g = fg(theta)
        run.record(theta, loss, "adam")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - cfg.learning_rate(t - 1) * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return theta


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        a = (s @ q) / (y @ s)
        alphas.append(a)
        q -= a * y
    if S:
        q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
    for (s, y), a in zip(zip(S, Y), reversed(alphas)):
        q += s * (a - (y @ q) / (y @ s))
    return q


def _quasi_newton(fg: _Cached, theta, cfg, run):
    n = len(theta)
    dense = cfg.second_order == "bfgs" and n <= cfg.dense_bfgs_max_params
    phase = "bfgs" if dense else "lbfgs"
    H = None
    S, Y = [], []
    loss, g = fg(theta)
    run.record(theta, loss, phase)
    stall = 0
    for _ in range(cfg.max_iter):
        if np.linalg.norm(g) <= cfg.gtol:
            break
        if dense:
            p = -(H @ g) if H is not None else -g
        else:
            p = -_two_loop(g, S, Y)
        if not g @ p < 0:
            H, S, Y = None, [], []
            p = -g
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", "The line search")   # failure is handled below
            alpha = line_search(fg.f, fg.g, theta, p, gfk=g, old_fval=loss, c1=cfg.c1, c2=cfg.c2, maxiter=30)[0]
        if alpha is None:
            if H is None and not S:
                log.info("line search failed along steepest descent; stopping")
                break
            H, S, Y = None, [], []   # restart from steepest descent
            continue
        new_theta = theta + alpha * p
        new_loss, new_g = fg(new_theta)
        slope0 = g @ p
        run.history.wolfe.append(bool(new_loss <= loss + cfg.c1 * alpha * slope0
                                      and abs(new_g @ p) <= cfg.c2 * abs(slope0)))
        s, y = new_theta - theta, new_g - g
        sy = s @ y
        if sy > 1e-16 * np.linalg.norm(s) * np.linalg.norm(y):
            if dense:
                if H is None:
                    H = np.eye(n) * (sy / (y @ y))
                rho = 1.0 / sy
                Hy = H @ y
                H += (rho * rho * (y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
            else:
                S.append(s)
                Y.append(y)
                if len(S) > cfg.memory:
                    S.pop(0)
                    Y.pop(0)
        stall = stall + 1 if loss - new_loss <= cfg.ftol * max(abs(loss), 1e-300) else 0
        theta, loss, g = new_theta, new_loss, new_g
        run.record(theta, loss, phase)
        if stall >= cfg.stall_iters:
            break
    return theta


def optimize(objective: Callable, template: MlpNetwork, cfg: TrainingConfig, monitor=None):
    """ADAM with exponentially decaying step, then BFGS or L-BFGS.

    ``objective(theta)`` returns ``(loss, gradient)``.  Returns the trained
    network and its :class:`TrainingHistory`.
    """
    fg = _Cached(objective)
    run = _Run(template, cfg, monitor, None)
    theta = template.flat().copy()
    theta = _adam(fg, theta, cfg, run)
    if cfg.second_order != "none" and cfg.max_iter > 0:
        theta = _quasi_newton(fg, theta, cfg, run)
    else:
        run.record(theta, fg(theta)[0], "final")
    return template.with_flat(theta), run.history


def _check_input_dim(net, dim):
    if net.input_dim != dim:
        raise ValueError(f"network input dimension {net.input_dim} does not match problem dimension {dim}")


def train_ivpinn(system: AssembledSystem, lifting: BoundaryLifting, net: MlpNetwork, cfg: TrainingConfig,
                 monitor=None):
    """Minimize the interpolated residual loss.  Returns ``(net, history)``."""
    _check_input_dim(net, system.mesh_H.dim)
    return optimize(interpolated_objective(system, lifting, net), net, cfg, monitor)


def train_vpinn_noninterp(problem, config: DiscretizationConfig, mesh_H, net: MlpNetwork, cfg: TrainingConfig,
                          lifting: BoundaryLifting | None = None, system: AssembledSystem | None = None,
                          monitor=None):
    """Minimize the loss with the lifted network evaluated at quadrature points."""
    if net.activation != "tanh":
        raise ValueError("the non-interpolated loss needs a smooth activation")
    _check_input_dim(net, mesh_H.dim)
    system = system or assemble_system(problem, config, mesh_H)
    lifting = lifting or problem.lifting()
    return optimize(noninterpolated_objective(system, lifting, net), net, cfg, monitor)


def train_parametric(systems, liftings, params, net: MlpNetwork, cfg: TrainingConfig, monitor=None):
    """Minimize the interpolated loss summed over ``params``."""
    _check_input_dim(net, systems[0].mesh_H.dim + 1)
    return optimize(parametric_objective(systems, liftings, params, net), net, cfg, monitor)
