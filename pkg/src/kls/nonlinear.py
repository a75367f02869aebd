"""Picard iteration for the weakly nonlinear Knudsen-layer problem.

Each step solves the linear problem with source ``Gamma(f_i, f_i) + S`` and
wall data ``R``, where ``f_i`` is the decaying part of the previous iterate.
The bilinear term is evaluated on a coarse axisymmetric velocity grid; the
converged coarse solution may then be lifted to a finer grid by a single
linear solve with the interpolated bilinear source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .collision import GammaOperator, VelocityModel
from .grids import Array, VelocityGrid, WeightSpec, sqrt_maxwellian, weight_norm
from .slab_solver import (
    ConvergenceError,
    KLResult,
    SolverConfig,
    SourceFn,
    solve_KL,
)


@dataclass
class NonlinearConfig:
    """Picard controls.  ``d`` is the fixed slab width used for every step."""

    delta_max: float = 0.1
    picard_tol: float = 1e-10
    max_picard_iters: int = 40
    d: float = 2.5
    weight: WeightSpec = field(default_factory=WeightSpec)

    def validate(self) -> "NonlinearConfig":
        for name in ("delta_max", "picard_tol", "d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_picard_iters < 1:
            raise ValueError("max_picard_iters must be >= 1")
        if self.d < 1.0:
            raise ValueError("d must be >= 1")
        return self


class PicardDivergence(ConvergenceError):
    """Successive Picard updates stopped shrinking."""


@dataclass
class NonlinearResult:
    kl: KLResult
    delta: float
    ratios: list[float]
    updates: list[float]
    norms: list[float]
    gain: float
    bound_ok: bool
    iterations: int

    @property
    def q_tilde(self) -> dict[str, float]:
        return self.kl.q_tilde

    def log(self) -> dict:
        return {"delta": self.delta, "iterations": self.iterations, "ratios": self.ratios,
                "updates": self.updates, "norms": self.norms, "linear_gain": self.gain,
                "bound_2C_delta_ok": self.bound_ok, "q_tilde": self.q_tilde}


def _nodal_source(x: Array, values: Array) -> SourceFn:
    """Piecewise-linear interpolation in ``x`` of nodal values ``(n_x, N)``."""

    def g(pts: Array) -> Array:
        pts = np.asarray(pts, dtype=float)
        k = np.clip(np.searchsorted(x, pts, side="right") - 1, 0, x.size - 2)
        t = ((pts - x[k]) / (x[k + 1] - x[k]))[:, None]
        return (1.0 - t) * values[k] + t * values[k + 1]

    return g


def _sum_sources(*gs: SourceFn | None) -> SourceFn | None:
    live = [g for g in gs if g is not None]
    if not live:
        return None
    return lambda x: sum(g(x) for g in live)


def source_size(
    S: SourceFn | None, R: Array | None, x: Array, model: VelocityModel, spec: WeightSpec, sigma0: float
) -> float:
    """``delta = |e^{sigma0 x} w S| + |w R|`` (sup norms on the grid)."""
    out = 0.0
    if S is not None:
        out += weight_norm(np.asarray(S(x)), x, model.speed2, spec, sigma0)
    if R is not None:
        out += float(np.max(spec(model.speed2) * np.abs(R)))
    return out


def solve_nonlinear(
    cfg: SolverConfig,
    ncfg: NonlinearConfig,
    model: VelocityModel,
    gamma: GammaOperator,
    alpha: float,
    S: SourceFn | None,
    R: Array | None,
) -> NonlinearResult:
    """Picard iteration ``f_{i+1} = KL(Gamma(f_i, f_i) + S, R)`` from ``f_0 = 0``.

    ``model`` must be the axisymmetric harmonic on the grid of ``gamma``.
    Updates are measured in ``|e^{sigma0 x / 2} w (.)|_inf``.
    """
    ncfg.validate()
    if model.size != gamma.T.shape[0]:
        raise ValueError("model and bilinear operator live on different grids")
    one = replace(cfg, d_schedule=(ncfg.d,), min_d_points=1)
    x = one.slab(ncfg.d).x_nodes
    spec = ncfg.weight
    delta = source_size(S, R, x, model, spec, cfg.sigma0)
    if delta > ncfg.delta_max:
        raise ValueError(f"source size delta={delta:.3e} exceeds delta_max={ncfg.delta_max:.3e}")
    norm = lambda F: weight_norm(F, x, model.speed2, spec, 0.5 * cfg.sigma0)  # noqa: E731
    F = np.zeros((x.size, model.size))
    ratios: list[float] = []
    updates: list[float] = []
    norms: list[float] = []
    kl = None
    gain = math.nan
    bound_ok = True
    for it in range(1, ncfg.max_picard_iters + 1):
        G = gamma(F, F) if it > 1 else np.zeros_like(F)
        src = _sum_sources(S, _nodal_source(x, G) if it > 1 else None)
        kl = solve_KL(one, model, alpha, src, R)
        F_new = kl.field.F
        upd = norm(F_new - F)
        updates.append(upd)
        norms.append(norm(F_new))
        if it == 1:
            gain = norms[0] / delta if delta > 0 else 0.0
        else:
            bound_ok &= norms[-1] <= 2.0 * norms[0] * (1.0 + 1e-9)
        if len(updates) >= 2 and updates[-2] > 0:
            ratios.append(upd / updates[-2])
            if ratios[-1] >= 1.0 and upd > ncfg.picard_tol:
                raise PicardDivergence(
                    f"Picard update ratio {ratios[-1]:.3f} >= 1 at delta={delta:.3e}; reduce the sources",
                    delta=delta, ratios=ratios)
        F = F_new
        if upd <= ncfg.picard_tol * max(1.0, norms[-1]):
            break
    else:
        raise ConvergenceError(f"Picard not converged in {ncfg.max_picard_iters} iterations",
                               delta=delta, ratios=ratios)
    assert kl is not None
    return NonlinearResult(kl, delta, ratios, updates, norms, gain, bool(bound_ok), it)


def plane_transfer(src: VelocityGrid, dst: VelocityGrid) -> Array:
    """Interpolation matrix for axisymmetric node functions from ``src`` to ``dst``.

    ``f / sqrt(m)`` is interpolated (Lagrange in ``v_r^2/2``, piecewise in ``v3``).
    """
    R = src.radial.interpolation(0.5 * dst.radial.nodes**2)
    Z = src.normal.interpolation(dst.normal.nodes)
    M = np.kron(R, Z)
    vr_s = np.repeat(src.radial.nodes, src.n_z)
    vz_s = np.tile(src.normal.nodes, src.n_r)
    vr_d = np.repeat(dst.radial.nodes, dst.n_z)
    vz_d = np.tile(dst.normal.nodes, dst.n_r)
    return (sqrt_maxwellian(vr_d**2 + vz_d**2)[:, None] * M
            / sqrt_maxwellian(vr_s**2 + vz_s**2)[None, :])


def fine_correction(
    cfg: SolverConfig,
    ncfg: NonlinearConfig,
    coarse: NonlinearResult,
    gamma: GammaOperator,
    fine_model: VelocityModel,
    fine_grid: VelocityGrid,
    alpha: float,
    S_fine: SourceFn | None,
    R_fine: Array | None,
) -> KLResult:
    """Linear solve on the fine grid with the interpolated, re-projected bilinear source."""
    F = coarse.kl.field.F
    x = coarse.kl.field.x
    G = gamma(F, F)
    T = plane_transfer(gamma.grid, fine_grid)
    Gf = G @ T.T
    Gf = Gf - fine_model.project(Gf)
    one = replace(cfg, d_schedule=(ncfg.d,), min_d_points=1)
    return solve_KL(one, fine_model, alpha, _sum_sources(S_fine, _nodal_source(x, Gf)), R_fine)


@dataclass
class ScalingStudy:
    ts: list[float]
    deviations: list[float]
    exponent: float
    max_ratio: float
    deltas: list[float]


def nonlinear_scaling(
    cfg: SolverConfig,
    ncfg: NonlinearConfig,
    model: VelocityModel,
    gamma: GammaOperator,
    alpha: float,
    S1: SourceFn | None,
    R1: Array | None,
    ts: tuple[float, ...] = (1e-2, 5e-3, 2.5e-3),
) -> ScalingStudy:
    """Deviation of the nonlinear solution from ``t`` times the linear one for sources ``t (S1, R1)``."""
    one = replace(cfg, d_schedule=(ncfg.d,), min_d_points=1)
    lin = solve_KL(one, model, alpha, S1, R1).field.F
    x = one.slab(ncfg.d).x_nodes
    devs, deltas, worst = [], [], 0.0
    for t in ts:
        S = None if S1 is None else (lambda xx, t=t: t * S1(xx))
        R = None if R1 is None else t * R1
        res = solve_nonlinear(cfg, ncfg, model, gamma, alpha, S, R)
        devs.append(weight_norm(res.kl.field.F - t * lin, x, model.speed2, ncfg.weight, 0.5 * cfg.sigma0))
        deltas.append(res.delta)
        worst = max([worst] + res.ratios)
    slope = float(np.polyfit(np.log(ts), np.log(devs), 1)[0])
    return ScalingStudy(list(ts), devs, slope, worst, deltas)


def calibrate_delta_max(
    cfg: SolverConfig,
    ncfg: NonlinearConfig,
    model: VelocityModel,
    gamma: GammaOperator,
    alpha: float,
    S1: SourceFn | None,
    R1: Array | None,
    ts: tuple[float, ...] = (0.4, 0.2, 0.1, 0.05, 0.025),
) -> tuple[float, list[dict]]:
    """Largest measured ``delta`` whose Picard ratios all stay at or below 1/2."""
    big = replace(ncfg, delta_max=math.inf)
    best = 0.0
    log = []
    for t in sorted(ts):
        S = None if S1 is None else (lambda xx, t=t: t * S1(xx))
        R = None if R1 is None else t * R1
        try:
            res = solve_nonlinear(cfg, big, model, gamma, alpha, S, R)
            mr = max(res.ratios) if res.ratios else 0.0
            log.append({"t": t, "delta": res.delta, "max_ratio": mr})
            if mr <= 0.5:
                best = max(best, res.delta)
        except ConvergenceError as exc:
            log.append({"t": t, "delta": exc.info.get("delta"), "max_ratio": None})
    return best, log
