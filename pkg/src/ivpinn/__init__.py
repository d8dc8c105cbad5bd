"""Interpolated variational physics-informed neural networks for elliptic problems."""
from .assembly import (AssembledSystem, ConfigurationError, DiscretizationConfig, ProblemDefinition, assemble_system,
                       compute_infsup, compute_residuals, solve_petrov_galerkin)
from .lifting import BoundaryLifting, apply_B, build_phi
from .mesh import Mesh, build_interval_mesh, build_structured_mesh, refine_nested
from .network import MlpNetwork, build_relu_bump, init_weights, mlp_forward, mlp_input_jacobian, mlp_weight_gradient
from .problems import get_case, list_cases
from .reporting import fit_rate, h1_error, interpolant_oracle_study
from .training import TrainingConfig, TrainingHistory, train_ivpinn, train_parametric, train_vpinn_noninterp

__version__ = "0.1.0"

__all__ = [
    "AssembledSystem", "ConfigurationError", "DiscretizationConfig", "ProblemDefinition", "assemble_system",
    "compute_infsup", "compute_residuals", "solve_petrov_galerkin",
    "BoundaryLifting", "apply_B", "build_phi",
    "Mesh", "build_interval_mesh", "build_structured_mesh", "refine_nested",
    "MlpNetwork", "build_relu_bump", "init_weights", "mlp_forward", "mlp_input_jacobian", "mlp_weight_gradient",
    "get_case", "list_cases",
    "fit_rate", "h1_error", "interpolant_oracle_study",
    "TrainingConfig", "TrainingHistory", "train_ivpinn", "train_parametric", "train_vpinn_noninterp",
]
