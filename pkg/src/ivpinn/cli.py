"""Batch experiment driver.

Usage::

    ivpinn run experiment.toml [--out-dir DIR]
    ivpinn list-cases
    ivpinn check

An experiment file is TOML with an ``[experiment]`` table and optional
``[mesh]``, ``[network]``, ``[training]``, ``[sweep]`` and ``[parametric]``
tables; see the README for the keys.  Results go to ``<out>/<mode>/``, where
``<out>`` is ``--out-dir``, the ``out_dir`` key, ``$IVPINN_OUT`` or
``./results`` in that order.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from .assembly import (ConfigurationError, DiscretizationConfig, assemble_system, compute_infsup, with_problem_data)
from .lifting import apply_B
from .mesh import meshsize
from .network import hidden_widths, init_weights, mlp_value_and_jacobian, save_checkpoint
from .problems import case_parametric_nonlinear, check_consistency, get_case, list_cases
from .reporting import (ConvergenceRecord, ConvergenceRow, csv_name, field_errors, h1_error, h1_norm,
                        interpolant_oracle_study, l2_error, system_measurement)
from .training import (TrainingConfig, interpolated_nodal_values, train_ivpinn, train_parametric,
                       train_vpinn_noninterp)

log = logging.getLogger("ivpinn")

MODES = ("ivpinn", "vpinn", "oracle-interp", "infsup", "zero-data", "parametric", "hyperparam-sweep")
EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


@dataclass
class ExperimentConfig:
    mode: str
    case: str
    k_test: int = 1
    q: int = 3
    nx: list = field(default_factory=list)
    layers: int = 3
    width: int = 20
    seed: int = 0
    training: dict = field(default_factory=dict)
    sweep_layers: list = field(default_factory=list)
    sweep_widths: list = field(default_factory=list)
    n_train: int = 13
    n_test: int = 50
    workers: int = 1
    out_dir: str | None = None

    @property
    def discretization(self) -> DiscretizationConfig:
        return DiscretizationConfig(self.k_test, self.q)

    def training_config(self, **overrides) -> TrainingConfig:
        return TrainingConfig(**{"seed": self.seed, **self.training, **overrides})


def _mesh_sequence(mesh: dict) -> list[int]:
    if "nx" in mesh:
        nx = mesh["nx"]
        return [int(n) for n in (nx if isinstance(nx, list) else [nx])]
    if "initial_nx" in mesh:
        return [int(mesh["initial_nx"]) * 2**i for i in range(int(mesh.get("refinements", 0)) + 1)]
    return []


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a parsed TOML document; raises :class:`ConfigurationError`."""
    exp = data.get("experiment")
    if not isinstance(exp, dict):
        raise ConfigurationError("missing [experiment] table")
    mode = exp.get("mode")
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
    default_case = {"zero-data": "zero1d", "parametric": "parametric"}.get(mode)
    case = exp.get("case", default_case)
    if case is None:
        raise ConfigurationError(f"mode {mode} needs a case")
    if case not in list_cases():
        raise ConfigurationError(f"unknown case {case!r}; available: {', '.join(list_cases())}")
    if (case == "parametric") != (mode == "parametric"):
        raise ConfigurationError("the parametric case is only available in parametric mode")

    net = data.get("network", {})
    sweep = data.get("sweep", {})
    par = data.get("parametric", {})
    training = dict(data.get("training", {}))
    unknown = set(training) - {f.name for f in dataclasses.fields(TrainingConfig)}
    if unknown:
        raise ConfigurationError(f"unknown training keys: {', '.join(sorted(unknown))}")
    cfg = ExperimentConfig(
        mode=mode, case=case, k_test=int(exp.get("k_test", 1)), q=int(exp.get("q", 3)),
        nx=_mesh_sequence(data.get("mesh", {})), layers=int(net.get("layers", 3)), width=int(net.get("width", 20)),
        seed=int(exp.get("seed", 0)), training=training,
        sweep_layers=[int(v) for v in sweep.get("layers", [])], sweep_widths=[int(v) for v in sweep.get("widths", [])],
        n_train=int(par.get("n_train", 13)), n_test=int(par.get("n_test", 50)),
        workers=int(exp.get("workers", 1)), out_dir=exp.get("out_dir"))

    try:
        cfg.discretization
        cfg.training_config()
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from exc
    if not cfg.nx or min(cfg.nx) < 1:
        raise ConfigurationError("[mesh] needs nx (int or list) or initial_nx/refinements")
    if mode == "hyperparam-sweep" and not (cfg.sweep_layers and cfg.sweep_widths):
        raise ConfigurationError("hyperparam-sweep needs [sweep] layers and widths")
    if mode in ("hyperparam-sweep", "parametric") and len(cfg.nx) != 1:
        raise ConfigurationError(f"{mode} runs on a single mesh; give one nx")
    if cfg.layers < 1 or cfg.width < 1 or cfg.workers < 1:
        raise ConfigurationError("layers, width and workers must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    return parse_config(data)


# -- per-row work --------------------------------------------------------------

def _train_row(cfg: ExperimentConfig, nx: int, out: Path, layers=None, width=None, tag=""):
    """Train on one coarse mesh; returns a :class:`ConvergenceRow`."""
    t0 = time.perf_counter()
    case = get_case(cfg.case)
    problem = case.problem
    system = assemble_system(problem, cfg.discretization, problem.build_mesh(nx))
    lifting = problem.lifting()
    widths = hidden_widths(problem.dim, layers or cfg.layers, width or cfg.width)
    net = init_weights(widths, cfg.seed)
    rule = system_measurement(system)
    stem = f"{cfg.case}_{cfg.k_test}_{cfg.q}_nx{nx}{tag}"
    tcfg = cfg.training_config(checkpoint_dir=str(out / "checkpoints" / stem))

    if cfg.mode == "vpinn":
        def measure(n):
            v, jac = mlp_value_and_jacobian(n, rule.points)
            val, grad = apply_B(lifting, v, jac, rule.points)
            return field_errors(case.exact, val, grad, rule.points, rule.weights)
        net, hist = train_vpinn_noninterp(problem, cfg.discretization, system.mesh_H, net, tcfg,
                                          lifting=lifting, system=system, monitor=lambda n: measure(n)[0])
        e1, e0 = measure(net)
    else:
        monitor = lambda n: h1_error(case.exact, interpolated_nodal_values(system, lifting, n), rule)
        net, hist = train_ivpinn(system, lifting, net, tcfg, monitor=monitor)
        u = interpolated_nodal_values(system, lifting, net)
        # the zero-data solution is 0, so the error is the norm of the trained field
        e1 = h1_norm(u, rule) if cfg.mode == "zero-data" else h1_error(case.exact, u, rule)
        e0 = l2_error(case.exact, u, rule)
    (out / "history").mkdir(parents=True, exist_ok=True)
    hist.to_csv(out / "history" / f"{stem}.csv")
    save_checkpoint(net, out / "checkpoints" / f"{stem}_final.bin")
    return ConvergenceRow(meshsize(system.mesh_H), meshsize(system.mesh_h), system.n_nodes, e1, e0,
                          hist.final_loss, time.perf_counter() - t0, cfg.seed)


def _run_rows(cfg, out, jobs):
    """Run ``(key, fn, args)`` jobs, serially or in worker processes; failures are logged."""
    results, failures = {}, []
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            futures = {key: pool.submit(fn, *args) for key, fn, args in jobs}
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as exc:   # a row failure must not stop the sequence
                    log.error("row %s failed: %s", key, exc)
                    failures.append((key, repr(exc)))
        return results, failures
    for key, fn, args in jobs:
        try:
            results[key] = fn(*args)
            log.info("row %s done", key)
        except Exception as exc:
            log.error("row %s failed: %s", key, exc)
            failures.append((key, repr(exc)))
    return results, failures


def _convergence_mode(cfg, out):
    jobs = [(nx, _train_row, (cfg, nx, out)) for nx in cfg.nx]
    results, failures = _run_rows(cfg, out, jobs)
    record = ConvergenceRecord(config=_echo(cfg))
    for row in results.values():
        record.add(row)
    record.to_csv(out / csv_name(cfg.case, cfg.discretization))
    return failures


def _oracle_mode(cfg, out):
    record = interpolant_oracle_study(get_case(cfg.case), cfg.discretization, cfg.nx)
    record.config.update(_echo(cfg))
    record.to_csv(out / csv_name(cfg.case, cfg.discretization))
    return []


def _infsup_row(cfg, nx):
    problem = get_case(cfg.case).problem
    system = assemble_system(problem, cfg.discretization, problem.build_mesh(nx), check_dimensions=False)
    rep = compute_infsup(system)
    return [nx, meshsize(system.mesh_H), meshsize(system.mesh_h), rep.dim_U0, rep.dim_V,
            rep.alpha_tilde, rep.c_h, rep.C_h]


def _write_table(path, header, rows, comments=()):
    with open(path, "w") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _infsup_mode(cfg, out):
    results, failures = _run_rows(cfg, out, [(nx, _infsup_row, (cfg, nx)) for nx in cfg.nx])
    _write_table(out / csv_name(cfg.case, cfg.discretization),
                 ["nx", "H", "h", "dim_U0", "dim_V", "alpha_tilde", "c_h", "C_h"],
                 [results[k] for k in cfg.nx if k in results], [f"{k} = {v}" for k, v in _echo(cfg).items()])
    return failures


def _sweep_row(cfg, nx, out, layers, width):
    row = _train_row(cfg, nx, out, layers, width, tag=f"_L{layers}_W{width}")
    w = hidden_widths(get_case(cfg.case).problem.dim, layers, width)
    n_params = sum(a * b + b for a, b in zip(w[:-1], w[1:]))
    return [layers, width, n_params, row.h1_error, row.l2_error, row.final_loss, row.wall_time]


def _sweep_mode(cfg, out):
    grid = [(L, W) for L in cfg.sweep_layers for W in cfg.sweep_widths]
    jobs = [((L, W), _sweep_row, (cfg, cfg.nx[0], out, L, W)) for L, W in grid]
    results, failures = _run_rows(cfg, out, jobs)
    _write_table(out / csv_name(cfg.case, cfg.discretization),
                 ["layers", "width", "n_params", "h1_error", "l2_error", "final_loss", "wall_time"],
                 [results[k] for k in grid if k in results], [f"{k} = {v}" for k, v in _echo(cfg).items()])
    return failures


def unseen_parameters(n: int, seed: int = 0) -> np.ndarray:
    """``n`` sorted parameter values in ``[0.5, 2]`` drawn away from the training grid."""
    family = case_parametric_nonlinear()
    train = family.training_values()
    rng = np.random.default_rng(seed)
    vals = []
    while len(vals) < n:
        p = rng.uniform(*family.p_range)
        if np.min(np.abs(train - p)) > 1e-3:
            vals.append(p)
    return np.sort(vals)


def run_parametric(cfg: ExperimentConfig, out: Path | None = None):
    """Train the parametric network; returns ``(rows, net, history)`` with rows ``[p, split, h1, l2]``."""
    family = case_parametric_nonlinear()
    train_p = family.training_values(cfg.n_train)
    test_p = unseen_parameters(cfg.n_test, cfg.seed)
    first = family.at(train_p[0])
    base = assemble_system(first.problem, cfg.discretization, first.problem.build_mesh(cfg.nx[0]))
    rule = system_measurement(base)

    def setup(p):
        case = family.at(p)
        check_consistency(case)
        return case, with_problem_data(base, case.problem), case.problem.lifting()

    train = [setup(p) for p in train_p]
    net = init_weights(hidden_widths(3, cfg.layers, cfg.width), cfg.seed)
    tcfg = cfg.training_config(checkpoint_dir=str(out / "checkpoints") if out else None)
    net, hist = train_parametric([t[1] for t in train], [t[2] for t in train], train_p, net, tcfg)
    rows = []
    for split, ps in (("train", train_p), ("test", test_p)):
        for p in ps:
            case, system, lifting = setup(p)
            nodes = system.nodes
            u = lifting.nodal(net(np.column_stack([nodes, np.full(len(nodes), p)])), nodes)
            rows.append([float(p), split, h1_error(case.exact, u, rule), l2_error(case.exact, u, rule)])
    return rows, net, hist


def _parametric_mode(cfg, out):
    rows, net, hist = run_parametric(cfg, out)
    _write_table(out / csv_name(cfg.case, cfg.discretization), ["p", "split", "h1_error", "l2_error"], rows,
                 [f"{k} = {v}" for k, v in _echo(cfg).items()])
    hist.to_csv(out / f"{cfg.case}_{cfg.k_test}_{cfg.q}_history.csv")
    save_checkpoint(net, out / "parametric_final.bin")
    return []


_DISPATCH = {
    "ivpinn": _convergence_mode, "vpinn": _convergence_mode, "zero-data": _convergence_mode,
    "oracle-interp": _oracle_mode, "infsup": _infsup_mode, "hyperparam-sweep": _sweep_mode,
    "parametric": _parametric_mode,
}


def _echo(cfg: ExperimentConfig) -> dict:
    return {k: v for k, v in dataclasses.asdict(cfg).items() if k != "out_dir"}


def _versions() -> dict:
    from . import __version__
    return {"ivpinn": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def run(cfg: ExperimentConfig, out_dir=None) -> int:
    base = Path(out_dir or cfg.out_dir or os.environ.get("IVPINN_OUT") or "results")
    out = base / cfg.mode
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        failures = _DISPATCH[cfg.mode](cfg, out)
    except ConfigurationError:
        raise
    except Exception as exc:
        log.error("%s failed: %s", cfg.mode, exc)
        failures = [("all", repr(exc))]
    manifest = {"config": _echo(cfg), "versions": _versions(), "wall_time": time.perf_counter() - t0,
                "failures": [{"row": str(k), "error": e} for k, e in failures],
                "status": "partial" if failures else "ok"}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return EXIT_PARTIAL if failures else EXIT_OK


def self_check() -> int:
    """Consistency checks of all cases and exactness of quadrature and interpolation."""
    from .fem import build_interpolation_matrices, build_space
    from .mesh import build_structured_mesh, refine_nested
    from .quadrature import map_rule, reference_triangle_rule

    ok = True
    for name in list_cases():
        cases = [case_parametric_nonlinear().at(p) for p in (0.5, 1.25, 2.0)] if name == "parametric" \
            else [get_case(name)]
        try:
            worst = max(check_consistency(c) for c in cases)
            print(f"case {name:10s} consistency {worst:.1e}  ok")
        except AssertionError as exc:
            ok = False
            print(f"case {name:10s} FAILED: {exc}")
    tri = np.array([[0.1, 0.2], [0.9, 0.3], [0.4, 0.8]])
    for q in range(1, 13):
        pts, wts = map_rule(reference_triangle_rule(q), tri)
        ref = map_rule(reference_triangle_rule(20), tri)
        err = max(abs(wts @ (pts[:, 0] ** a * pts[:, 1] ** (d - a)) - ref[1] @ (ref[0][:, 0] ** a * ref[0][:, 1] ** (d - a)))
                  for d in range(q + 1) for a in range(d + 1))
        good = err < 1e-13
        ok &= good
        print(f"quadrature q={q:2d} max error {err:.1e}  {'ok' if good else 'FAILED'}")
    mesh = build_structured_mesh(2)
    for k in range(1, 7):
        fine = refine_nested(mesh, k)
        space = build_space(mesh, k)
        pts, _ = map_rule(reference_triangle_rule(5), fine.element_vertices())
        mats = build_interpolation_matrices(space, pts, fine.parent_map)
        f = lambda x: (1 + x[:, 0] - 2 * x[:, 1]) ** k
        err = np.max(np.abs(mats.M @ f(space.nodes) - f(mats.points)))
        good = err < 1e-9
        ok &= good
        print(f"interpolation k={k} max error {err:.1e}  {'ok' if good else 'FAILED'}")
    return EXIT_OK if ok else EXIT_PARTIAL


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ivpinn", description="Interpolated variational PINN experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment described by a TOML file")
    p_run.add_argument("config")
    p_run.add_argument("--out-dir")
    sub.add_parser("list-cases", help="list the registered test cases")
    sub.add_parser("check", help="run consistency and exactness self-tests")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "list-cases":
        for name in list_cases():
            print(name)
        return EXIT_OK
    if args.command == "check":
        return self_check()
    try:
        cfg = load_config(args.config)
        return run(cfg, args.out_dir)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
