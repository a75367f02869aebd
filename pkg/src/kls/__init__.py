"""Knudsen-layer solver for the linearized hard-sphere Boltzmann equation in a slab."""

from .boundary import (
    BoundarySpec,
    SolvabilityError,
    TraceField,
    apply_K_gamma,
    apply_maxwell,
    apply_specular,
    check_solvability,
    mass_flux,
)
from .collision import (
    CollisionOperator,
    CollisionQuadrature,
    GammaOperator,
    KernelQuadrature,
    OperatorError,
    ReducedOperator,
    VelocityModel,
    assemble_LS,
    collision_frequency,
    compute_kappas,
    compute_nu,
    gamma_bilinear,
    model_from_mode,
    model_full,
    model_reduced,
)
from .fluid_limit import (
    SlipResult,
    compute_slip,
    emit_slip_conditions,
    solve_phi_theta,
    solve_phi_u,
    solve_phi_u_lifted,
)
from .grids import AxiGrid, SlabGrid, VelocityGrid, WeightSpec, build_velocity_grid, weight_norm
from .nonlinear import NonlinearConfig, calibrate_delta_max, nonlinear_scaling, solve_nonlinear
from .slab_solver import (
    ConvergenceError,
    SolverConfig,
    compute_q,
    duhamel_sweep,
    solve_KL,
    solve_slab,
    verify_lambda_independence,
)

__all__ = [
    "AxiGrid", "BoundarySpec", "CollisionOperator", "CollisionQuadrature", "ConvergenceError",
    "GammaOperator", "KernelQuadrature", "NonlinearConfig", "OperatorError", "ReducedOperator",
    "SlabGrid", "SlipResult", "SolvabilityError", "SolverConfig", "TraceField", "VelocityGrid",
    "VelocityModel", "WeightSpec", "apply_K_gamma", "apply_maxwell", "apply_specular", "assemble_LS",
    "build_velocity_grid", "calibrate_delta_max", "check_solvability", "collision_frequency",
    "compute_kappas", "compute_nu", "compute_q", "compute_slip", "duhamel_sweep", "emit_slip_conditions",
    "gamma_bilinear", "mass_flux", "model_from_mode", "model_full", "model_reduced", "nonlinear_scaling",
    "solve_KL", "solve_nonlinear", "solve_phi_theta", "solve_phi_u", "solve_phi_u_lifted", "solve_slab",
    "verify_lambda_independence", "weight_norm",
]
__version__ = "0.1.0"
