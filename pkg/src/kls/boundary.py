"""Wall operators: specular, diffuse and Maxwell reflection, mass flux, solvability.

Orientation: at ``x = 0`` the incoming half is ``v3 > 0``; at ``x = d`` it is
``v3 < 0``.  All operators act on :class:`TraceField` objects that carry the
velocity-set data they need (normal component, quadrature weights, the
reflection permutation and the density direction ``sqrt(m)``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray

from .grids import Array

Wall = Literal["0", "d"]
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class TraceField:
    """Values of ``f`` at one wall on every velocity node.

    ``sqrt_m`` is the density direction of the velocity set; ``None`` for
    sets (non-axisymmetric harmonics) on which the diffuse operator vanishes.
    """

    values: Array
    v3: Array
    weights: Array
    reflection: NDArray[np.int64]
    sqrt_m: Array | None
    wall: Wall = "0"

    @classmethod
    def on(cls, velocity_set: Any, values: Array, wall: Wall = "0") -> "TraceField":
        """Build from a :class:`~kls.grids.VelocityGrid` or a velocity model."""
        refl = getattr(velocity_set, "reflection_map", None)
        if refl is None:
            refl = velocity_set.reflection
        if hasattr(velocity_set, "density_trace"):
            sm = velocity_set.density_trace
        else:
            sm = velocity_set.sqrt_m
        return cls(np.asarray(values, dtype=float), velocity_set.v3, velocity_set.weights,
                   np.asarray(refl), sm, wall)

    @property
    def incoming(self) -> NDArray[np.bool_]:
        return self.v3 > 0 if self.wall == "0" else self.v3 < 0

    @property
    def outgoing(self) -> NDArray[np.bool_]:
        return ~self.incoming

    def with_values(self, values: Array) -> "TraceField":
        return replace(self, values=np.asarray(values, dtype=float))


def apply_specular(trace: TraceField) -> TraceField:
    """Incoming values replaced by the outgoing value at the mirrored velocity."""
    out = trace.values.copy()
    inc = trace.incoming
    out[inc] = trace.values[trace.reflection[inc]]
    return trace.with_values(out)


def mass_flux(trace: TraceField) -> float:
    """Outgoing flux ``int_{v3<0} |v3| f sqrt(m) dv`` at ``x = 0``.

    At ``x = d`` the outgoing half is ``v3 > 0``.  Zero for velocity sets
    without a density direction.
    """
    if trace.sqrt_m is None:
        return 0.0
    out = trace.outgoing
    return float(np.sum(trace.weights[out] * np.abs(trace.v3[out]) * trace.values[out] * trace.sqrt_m[out]))


def apply_K_gamma(trace: TraceField) -> TraceField:
    """Diffuse re-emission ``sqrt(2 pi m) P_gamma f`` on the incoming half, zero elsewhere."""
    out = np.zeros_like(trace.values)
    if trace.sqrt_m is not None:
        inc = trace.incoming
        out[inc] = _SQRT_2PI * trace.sqrt_m[inc] * mass_flux(trace)
    return trace.with_values(out)


@dataclass
class BoundarySpec:
    """Maxwell wall at ``x = 0``: ``gamma_- f = (1-alpha) L gamma_+ f + alpha K gamma_+ f + r``.

    When ``lam`` is set the diffuse part is prescribed instead as
    ``sqrt(2 pi m) lam``, i.e. the outgoing mass flux is fixed to ``lam``.
    """

    alpha: float
    r: Array | None = None
    lam: float | None = None

    def validate(self, v3: Array, allow_diffuse_limit: bool = False) -> "BoundarySpec":
        hi_ok = self.alpha <= 1.0 if allow_diffuse_limit else self.alpha < 1.0
        if not (0.0 < self.alpha and hi_ok):
            rng = "(0, 1]" if allow_diffuse_limit else "(0, 1)"
            raise ValueError(f"alpha={self.alpha} must lie in {rng}")
        if self.r is not None:
            r = np.asarray(self.r, dtype=float)
            if r.shape != v3.shape:
                raise ValueError(f"r has shape {r.shape}, expected {v3.shape}")
            off = v3 < 0
            if np.any(r[off] != 0.0):
                warnings.warn("boundary source r is nonzero on v3 < 0; those values are zeroed",
                              stacklevel=2)
                r = np.where(off, 0.0, r)
            self.r = r
        return self

    def source(self, v3: Array) -> Array:
        return np.zeros_like(v3) if self.r is None else np.where(v3 > 0, self.r, 0.0)


def apply_maxwell(trace: TraceField, spec: BoundarySpec) -> TraceField:
    """Incoming trace at ``x = 0`` computed from the outgoing one."""
    if trace.wall != "0":
        raise ValueError("the Maxwell condition is imposed at x = 0")
    inc = trace.incoming
    spec_part = apply_specular(trace).values
    if spec.lam is None:
        diffuse = apply_K_gamma(trace).values
    else:
        diffuse = np.zeros_like(trace.values)
        if trace.sqrt_m is not None:
            diffuse[inc] = _SQRT_2PI * trace.sqrt_m[inc] * spec.lam
    out = trace.values.copy()
    r = spec.source(trace.v3)
    out[inc] = (1.0 - spec.alpha) * spec_part[inc] + spec.alpha * diffuse[inc] + r[inc]
    return trace.with_values(out)


def maxwell_residual(trace: TraceField, alpha: float) -> Array:
    """``(L^R - alpha L^D) f = gamma_- f - (1-alpha) L gamma_+ f - alpha K gamma_+ f`` on the incoming half."""
    inc = trace.incoming
    res = (trace.values - (1.0 - alpha) * apply_specular(trace).values
           - alpha * apply_K_gamma(trace).values)
    return np.where(inc, res, 0.0)


@dataclass
class SolvabilityReport:
    macro_norms: Array
    r_flux: float
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        self.passed = bool(np.all(self.macro_norms <= self.tol) and abs(self.r_flux) <= self.tol)

    def offending(self) -> list[str]:
        msgs = []
        bad = np.flatnonzero(self.macro_norms > self.tol)
        if bad.size:
            msgs.append(f"|P g(x)| up to {self.macro_norms.max():.3e} at {bad.size} x-nodes")
        if abs(self.r_flux) > self.tol:
            msgs.append(f"incoming flux moment of r = {self.r_flux:.3e}")
        return msgs


class SolvabilityError(ValueError):
    """Sources violate the solvability condition (g orthogonal to the null space, r flux-free)."""

    def __init__(self, report: SolvabilityReport):
        self.report = report
        super().__init__("solvability condition violated: " + "; ".join(report.offending()))


def check_solvability(
    g_values: Array | None,
    r: Array | None,
    velocity_set: Any,
    tol: float = 1e-8,
    raise_on_fail: bool = True,
) -> SolvabilityReport:
    """Check ``P g(x) = 0`` at every x-node and ``int_{v3>0} v3 sqrt(m) r dv = 0``.

    ``velocity_set`` is a :class:`~kls.collision.VelocityModel` (its macroscopic
    basis defines ``P``).
    """
    model = velocity_set
    if g_values is None:
        norms = np.zeros(1)
    else:
        g = np.atleast_2d(g_values)
        proj = model.project(g)
        norms = np.sqrt(model.inner(proj, proj))
    flux = 0.0
    if r is not None and model.density_trace is not None:
        inc = model.v3 > 0
        flux = float(np.sum(model.weights[inc] * model.v3[inc] * model.density_trace[inc]
                            * np.asarray(r)[inc]))
    rep = SolvabilityReport(norms, flux, tol)
    if raise_on_fail and not rep.passed:
        raise SolvabilityError(rep)
    return rep
