"""Viscous-slip and temperature-jump coefficients from two half-space problems.

``phi_theta`` is axisymmetric and is solved on the ``m = 0`` harmonic of the
full operator with wall data ``(2 - alpha) B_hat_3``; the jump coefficient is
the far-field temperature constant.  ``phi_u`` is solved with the reduced
operator ``L^S`` (``f = v_1 phi``) with wall data ``(2 - alpha) (L^S)^{-1}(v3 sqrt m)``;
the slip coefficient is the far-field velocity constant.  The latter is
cross-checked against the ``m = 1`` harmonic of the full operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .boundary import TraceField, maxwell_residual
from .collision import (
    CollisionOperator,
    ReducedOperator,
    VelocityModel,
    model_from_mode,
    model_reduced,
)
from .grids import Array, AxiGrid, VelocityGrid, sqrt_maxwellian
from .slab_solver import KLResult, SolverConfig, extract_macro, solve_KL


@dataclass
class PhiResult:
    coefficient: float
    kl: KLResult
    model: VelocityModel
    boundary_data: Array


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha={alpha} must lie in (0, 1]")


def phi_theta_data(model: VelocityModel, alpha: float) -> Array:
    """Wall data ``(2 - alpha) B_hat_3`` on ``v3 > 0`` for the axisymmetric harmonic."""
    return (2.0 - alpha) * np.where(model.v3 > 0, model.psi["c"], 0.0)


def phi_u_data(model: VelocityModel, alpha: float, scale: float = 1.0) -> Array:
    """Wall data ``(2 - alpha) A_hat_13`` (in the model's own representation) on ``v3 > 0``."""
    return scale * (2.0 - alpha) * np.where(model.v3 > 0, model.psi["b1"], 0.0)


def solve_phi_theta(alpha: float, op: CollisionOperator, cfg: SolverConfig, lam: float = 0.0) -> PhiResult:
    """Temperature-jump problem; ``c_theta`` is the far-field temperature constant."""
    _check_alpha(alpha)
    model = model_from_mode(op, 0)
    r = phi_theta_data(model, alpha)
    kl = solve_KL(cfg, model, alpha, None, r, lam=lam, allow_diffuse_limit=True)
    return PhiResult(kl.q_tilde["c"], kl, model, r)


def solve_phi_u(
    alpha: float, opS: ReducedOperator, cfg: SolverConfig, forcing_scale: float = 1.0, lam: float = 0.0
) -> PhiResult:
    """Viscous-slip problem with the reduced operator; ``forcing_scale = 0`` switches the forcing off."""
    _check_alpha(alpha)
    model = model_reduced(opS)
    r = phi_u_data(model, alpha, forcing_scale)
    kl = solve_KL(cfg, model, alpha, None, r, lam=lam, allow_diffuse_limit=True)
    return PhiResult(kl.q_tilde["b1"], kl, model, r)


def solve_phi_u_lifted(alpha: float, op: CollisionOperator, cfg: SolverConfig) -> PhiResult:
    """Same problem for ``v_1 phi_u`` on the ``sin(theta)`` harmonic of the full operator."""
    _check_alpha(alpha)
    model = model_from_mode(op, 1, "sin")
    r = phi_u_data(model, alpha)
    kl = solve_KL(cfg, model, alpha, None, r, allow_diffuse_limit=True)
    return PhiResult(kl.q_tilde["b1"], kl, model, r)


def lift_residual(phi_u: PhiResult, op: CollisionOperator) -> float:
    """Residual of ``v3 d/dx (v_1 phi) + L (v_1 phi) = 0`` on the full grid.

    ``phi`` (on the reduced grid) is interpolated to the radial nodes of the
    full grid, multiplied by ``v_r`` and inserted into the cell balance of
    the full ``m = 1`` harmonic.  Returned relative to the size of the
    transport term.
    """
    g = op.grid
    fld = phi_u.kl.raw
    axi_grid = _reduced_grid(phi_u)
    s_full = 0.5 * g.radial.nodes**2
    R = axi_grid.radial.interpolation(s_full)
    n_r, n_z = axi_grid.n_r, axi_grid.n_z
    sm_axi = axi_grid.sqrt_m
    vr = np.repeat(g.radial.nodes, g.n_z)
    vz = np.tile(g.normal.nodes, g.n_r)
    sm_full = sqrt_maxwellian(vr**2 + vz**2)

    def lift(vals: Array) -> Array:
        u = (vals / sm_axi).reshape(vals.shape[:-1] + (n_r, n_z))
        out = np.einsum("ra,...ab->...rb", R, u).reshape(vals.shape[:-1] + (-1,))
        return vr * out * sm_full

    F = lift(fld.F)
    Fbar = lift(fld.Fbar)
    L1 = op.blocks[1].L
    h = np.diff(fld.x)[:, None]
    transport = vz * (F[1:] - F[:-1]) / h
    res = transport + Fbar @ L1.T
    return float(np.max(np.abs(res)) / np.max(np.abs(transport)))


def _reduced_grid(phi_u: PhiResult) -> AxiGrid:
    grid = phi_u.model.axi_grid
    if grid is None:
        raise ValueError("phi_u was not produced by the reduced operator")
    return grid


def zeroth_order_wall_kernel(grid: VelocityGrid, alpha: float, tol: float = 1e-8) -> dict:
    """Which local Maxwellians ``(rho + u.v + theta (|v|^2-3)/2) sqrt(m)`` satisfy the wall condition.

    Returns singular values of the wall operator on the five-dimensional
    family and the normalized kernel directions (ordered rho, u1, u2, u3, theta).
    """
    sm = grid.sqrt_m
    v = grid.nodes
    basis = [sm, v[:, 0] * sm, v[:, 1] * sm, v[:, 2] * sm, 0.5 * (grid.speed2 - 3.0) * sm]
    cols = []
    inc = grid.v3 > 0
    for b in basis:
        cols.append(maxwell_residual(TraceField.on(grid, b, "0"), alpha)[inc])
    M = np.stack(cols, axis=1)
    _, s, vt = np.linalg.svd(M, full_matrices=True)
    s_full = np.zeros(5)
    s_full[: s.size] = s
    kernel = vt[s_full <= tol * max(s_full.max(), 1.0)]
    kernel = kernel * np.sign(kernel[:, :1] + (kernel[:, :1] == 0))
    return {"singular_values": s_full, "kernel": kernel,
            "density_only": bool(kernel.shape[0] == 1 and abs(abs(kernel[0, 0]) - 1.0) < 1e-8)}


@dataclass
class SlipResult:
    alpha: float
    c_u: float
    c_theta: float
    phi_u: PhiResult
    phi_theta: PhiResult
    convergence: dict = field(default_factory=dict)

    @property
    def sigma_fit_u(self) -> float:
        return self.phi_u.kl.sigma_fit

    @property
    def sigma_fit_theta(self) -> float:
        return self.phi_theta.kl.sigma_fit

    def to_json(self, grid: Mapping[str, object]) -> dict:
        return {
            "alpha": self.alpha,
            "c_u": self.c_u,
            "c_theta": self.c_theta,
            "sigma_fit_u": self.sigma_fit_u,
            "sigma_fit_theta": self.sigma_fit_theta,
            "grid": dict(grid),
            "d_final": float(self.phi_theta.kl.field.d),
            "convergence": self.convergence,
        }

    def layers(self) -> tuple[Array, Array]:
        """Columns: x, b1 of phi_u, a and c of phi_theta (decaying parts)."""
        mu = extract_macro(self.phi_u.kl.field)
        mt = extract_macro(self.phi_theta.kl.field)
        x = self.phi_theta.kl.field.x
        xu = self.phi_u.kl.field.x
        b1 = np.interp(x, xu, mu.b1)
        return x, np.stack([b1, mt.a, mt.c], axis=1)


def compute_slip(
    alpha: float, op: CollisionOperator, opS: ReducedOperator, cfg: SolverConfig
) -> SlipResult:
    pu = solve_phi_u(alpha, opS, cfg)
    pt = solve_phi_theta(alpha, op, cfg)
    conv = {"d_history_u": [(d, q.get("b1", 0.0)) for d, q in pu.kl.far.d_history],
            "d_history_theta": [(d, q.get("c", 0.0)) for d, q in pt.kl.far.d_history]}
    return SlipResult(alpha, pu.coefficient, pt.coefficient, pu, pt, conv)


def emit_slip_conditions(res: SlipResult, gradients: Mapping[str, float]) -> dict[str, float]:
    """First-order wall values from the normal gradients of the leading fields.

    ``gradients`` keys: ``d3u1, d3u2, d1u3, d2u3, d3theta`` (missing keys are 0).
    """
    gr = {k: float(gradients.get(k, 0.0)) for k in ("d3u1", "d3u2", "d1u3", "d2u3", "d3theta")}
    unknown = set(gradients) - set(gr)
    if unknown:
        raise ValueError(f"unknown gradient keys: {sorted(unknown)}")
    return {
        "u1": res.c_u * (gr["d3u1"] + gr["d1u3"]),
        "u2": res.c_u * (gr["d3u2"] + gr["d2u3"]),
        "u3": 0.0,
        "theta": res.c_theta * gr["d3theta"],
    }


def slip_json(res: SlipResult, grid: Mapping[str, object]) -> str:
    return json.dumps(res.to_json(grid), indent=2, sort_keys=True)
