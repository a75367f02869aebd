"""Velocity and spatial grids for slab kinetic problems.

Velocity space uses cylindrical coordinates about the wall normal:
``v1 = v_r sin(theta)``, ``v2 = v_r cos(theta)``, ``v3``.  Radial nodes are
Gauss points in ``s = v_r**2 / 2`` for the truncated weight ``e^{-s}`` (or
``s e^{-s}`` for the reduced measure), normal nodes are half-range Gauss
points for ``e^{-t**2/2}`` on ``(0, v_max)`` mirrored to the negative side,
and the azimuth is a uniform ring with a half-step offset.  No node sits on
the grazing plane ``v3 = 0``.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def maxwellian(speed2: Array) -> Array:
    """Standard Maxwellian ``m(v) = (2 pi)^{-3/2} exp(-|v|^2/2)``."""
    return (2.0 * np.pi) ** -1.5 * np.exp(-0.5 * np.asarray(speed2))


def sqrt_maxwellian(speed2: Array) -> Array:
    return (2.0 * np.pi) ** -0.75 * np.exp(-0.25 * np.asarray(speed2))


def truncated_gauss_rule(
    weight: Callable[[Array], Array], upper: float, n: int, n_disc: int = 800
) -> tuple[Array, Array]:
    """Gauss rule for ``weight`` on ``[0, upper]``.

    Recurrence coefficients come from a discretized Stieltjes procedure on a
    fine Gauss-Legendre discretization of the measure; nodes and weights then
    follow from the Jacobi matrix (Golub-Welsch).
    """
    x, w = np.polynomial.legendre.leggauss(n_disc)
    t = 0.5 * upper * (x + 1.0)
    wt = 0.5 * upper * w * weight(t)
    total = wt.sum()
    alpha = np.zeros(n)
    beta = np.zeros(n)
    p_prev = np.zeros_like(t)
    p = np.ones_like(t) / np.sqrt(total)
    for k in range(n):
        alpha[k] = np.sum(wt * t * p * p)
        q = (t - alpha[k]) * p - (np.sqrt(beta[k]) * p_prev if k > 0 else 0.0)
        if k + 1 < n:
            nrm2 = np.sum(wt * q * q)
            beta[k + 1] = nrm2
            p_prev, p = p, q / np.sqrt(nrm2)
    off = np.sqrt(beta[1:])
    jac = np.diag(alpha) + np.diag(off, 1) + np.diag(off, -1)
    nodes, vecs = np.linalg.eigh(jac)
    weights = total * vecs[0] ** 2
    return nodes, weights


def barycentric_weights(nodes: Array) -> Array:
    diff = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def lagrange_matrix(nodes: Array, bary: Array, x: Array) -> Array:
    """Values of all Lagrange cardinal polynomials at ``x``, shape (len(x), n)."""
    x = np.asarray(x, dtype=float)
    diff = x[:, None] - nodes[None, :]
    hit = diff == 0.0
    diff[hit] = 1.0
    terms = bary[None, :] / diff
    out = terms / terms.sum(axis=1, keepdims=True)
    rows = hit.any(axis=1)
    if rows.any():
        out[rows] = hit[rows].astype(float)
    return out


@dataclass(frozen=True)
class NormalRule:
    """Symmetric half-range rule in ``v3``: negatives first, then positives."""

    n_z: int
    v_max: float
    half_nodes: Array = field(init=False, repr=False)
    half_weights: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        t, w = truncated_gauss_rule(lambda t: np.exp(-0.5 * t * t), self.v_max, self.n_z // 2)
        object.__setattr__(self, "half_nodes", t)
        object.__setattr__(self, "half_weights", w)

    @property
    def nodes(self) -> Array:
        return np.concatenate([-self.half_nodes[::-1], self.half_nodes])

    @property
    def weights(self) -> Array:
        """Gauss weights for the measure ``e^{-t^2/2} dt``."""
        return np.concatenate([self.half_weights[::-1], self.half_weights])

    def interpolation(self, t: Array) -> Array:
        """Piecewise Lagrange cardinals, one polynomial per half-line."""
        t = np.asarray(t, dtype=float)
        h = self.n_z // 2
        bary = barycentric_weights(self.half_nodes)
        lag = lagrange_matrix(self.half_nodes, bary, np.abs(t))
        out = np.zeros((t.size, self.n_z))
        pos = t > 0
        out[pos, h:] = lag[pos]
        out[~pos, :h] = lag[~pos][:, ::-1]
        return out


@dataclass(frozen=True)
class RadialRule:
    """Gauss rule in ``s = v_r^2/2`` for ``s^power e^{-s}`` on ``(0, v_max^2/2)``."""

    n_r: int
    v_max: float
    power: int = 0
    s_nodes: Array = field(init=False, repr=False)
    s_weights: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        p = self.power
        s, w = truncated_gauss_rule(lambda s: s**p * np.exp(-s), 0.5 * self.v_max**2, self.n_r)
        object.__setattr__(self, "s_nodes", s)
        object.__setattr__(self, "s_weights", w)

    @property
    def nodes(self) -> Array:
        return np.sqrt(2.0 * self.s_nodes)

    def interpolation(self, s: Array) -> Array:
        return lagrange_matrix(self.s_nodes, barycentric_weights(self.s_nodes), s)


def _check_velocity_params(n_r: int, n_z: int, v_max: float) -> None:
    if n_r < 4 or n_z < 4:
        raise ValueError(f"n_r and n_z must be >= 4 (got n_r={n_r}, n_z={n_z})")
    if n_z % 2:
        raise ValueError(f"n_z={n_z} is odd: a symmetric normal rule would put a node on v3 = 0")
    if v_max < 5.0:
        raise ValueError(f"v_max={v_max} below 5 thermal speeds")


@dataclass(frozen=True)
class VelocityGrid:
    """Tensor grid over R^3: radial x normal x azimuthal, azimuth fastest.

    ``weights`` integrate plain functions: ``sum(weights * F(nodes)) ~ int F dv``.
    """

    n_r: int
    n_z: int
    v_max: float = 7.0
    n_theta: int = 8
    radial: RadialRule = field(init=False, repr=False)
    normal: NormalRule = field(init=False, repr=False)
    theta: Array = field(init=False, repr=False)
    nodes: Array = field(init=False, repr=False)
    weights: Array = field(init=False, repr=False)
    reflection_map: NDArray[np.int64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        _check_velocity_params(self.n_r, self.n_z, self.v_max)
        if self.n_theta < 5:
            raise ValueError("n_theta must be >= 5 to resolve second azimuthal harmonics")
        radial = RadialRule(self.n_r, self.v_max, 0)
        normal = NormalRule(self.n_z, self.v_max)
        theta = (np.arange(self.n_theta) + 0.5) * 2.0 * np.pi / self.n_theta
        vr, v3, th = np.meshgrid(radial.nodes, normal.nodes, theta, indexing="ij")
        nodes = np.stack([vr * np.sin(th), vr * np.cos(th), v3], axis=-1).reshape(-1, 3)
        sw, zw = np.meshgrid(radial.s_weights, normal.weights, indexing="ij")
        plane = (sw * zw * np.exp(0.5 * (radial.nodes[:, None] ** 2 + normal.nodes[None, :] ** 2)))
        weights = np.repeat(plane.ravel(), self.n_theta) * (2.0 * np.pi / self.n_theta)
        idx = np.arange(nodes.shape[0]).reshape(self.n_r, self.n_z, self.n_theta)
        refl = idx[:, ::-1, :].ravel()
        for name, val in (("radial", radial), ("normal", normal), ("theta", theta),
                          ("nodes", nodes), ("weights", weights), ("reflection_map", refl)):
            object.__setattr__(self, name, val)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_r, self.n_z, self.n_theta)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    @property
    def v3(self) -> Array:
        return self.nodes[:, 2]

    @property
    def speed2(self) -> Array:
        return np.sum(self.nodes**2, axis=1)

    @property
    def speed(self) -> Array:
        return np.sqrt(self.speed2)

    @property
    def sqrt_m(self) -> Array:
        return sqrt_maxwellian(self.speed2)

    @property
    def incoming_mask(self) -> NDArray[np.bool_]:
        """Nodes entering the domain through the wall at x = 0 (v3 > 0)."""
        return self.v3 > 0

    @property
    def outgoing_mask(self) -> NDArray[np.bool_]:
        return self.v3 < 0

    @property
    def plane_weights(self) -> Array:
        """Weights on the (v_r, v3) plane for ``int F v_r dv_r dv3``."""
        vr = self.radial.nodes[:, None]
        vz = self.normal.nodes[None, :]
        w = self.radial.s_weights[:, None] * self.normal.weights[None, :]
        return (w * np.exp(0.5 * (vr**2 + vz**2))).ravel()

    def integrate(self, values: Array) -> Array:
        """Quadrature over the last axis."""
        return np.asarray(values) @ self.weights

    def fingerprint(self) -> str:
        key = f"vgrid:{self.n_r}:{self.n_z}:{self.v_max!r}:{self.n_theta}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["index", "v1", "v2", "v3", "weight"])
            for i, (v, w) in enumerate(zip(self.nodes, self.weights)):
                wr.writerow([i, f"{v[0]:.17g}", f"{v[1]:.17g}", f"{v[2]:.17g}", f"{w:.17g}"])


def build_velocity_grid(n_r: int, n_z: int, v_max: float = 7.0, n_theta: int = 8) -> VelocityGrid:
    return VelocityGrid(n_r, n_z, v_max, n_theta)


@dataclass(frozen=True)
class AxiGrid:
    """Grid on the (v_r, v3) half-plane for the measure ``v_r^3 dv_r dv3``."""

    n_r: int
    n_z: int
    v_max: float = 7.0
    radial: RadialRule = field(init=False, repr=False)
    normal: NormalRule = field(init=False, repr=False)

    def __post_init__(self) -> None:
        _check_velocity_params(self.n_r, self.n_z, self.v_max)
        object.__setattr__(self, "radial", RadialRule(self.n_r, self.v_max, 1))
        object.__setattr__(self, "normal", NormalRule(self.n_z, self.v_max))

    @property
    def nodes(self) -> Array:
        vr, v3 = np.meshgrid(self.radial.nodes, self.normal.nodes, indexing="ij")
        return np.stack([vr.ravel(), v3.ravel()], axis=1)

    @property
    def size(self) -> int:
        return self.n_r * self.n_z

    @property
    def v_r(self) -> Array:
        return self.nodes[:, 0]

    @property
    def v3(self) -> Array:
        return self.nodes[:, 1]

    @property
    def speed2(self) -> Array:
        return np.sum(self.nodes**2, axis=1)

    @property
    def sqrt_m(self) -> Array:
        return sqrt_maxwellian(self.speed2)

    @property
    def weights(self) -> Array:
        """``sum(weights * F) ~ int F v_r^3 dv_r dv3``; ds = v_r dv_r and v_r^2 = 2s."""
        vr = self.radial.nodes[:, None]
        vz = self.normal.nodes[None, :]
        w = 2.0 * self.radial.s_weights[:, None] * self.normal.weights[None, :]
        return (w * np.exp(0.5 * (vr**2 + vz**2))).ravel()

    @property
    def reflection_map(self) -> NDArray[np.int64]:
        return np.arange(self.size).reshape(self.n_r, self.n_z)[:, ::-1].ravel()

    def fingerprint(self) -> str:
        key = f"axigrid:{self.n_r}:{self.n_z}:{self.v_max!r}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SlabGrid:
    """Nodes on ``[0, d]``: geometric growth from ``h0`` up to ``h_max``, then uniform.

    Grids with equal ``(h0, growth, h_max)`` are nested prefixes of each other.
    """

    d: float
    h0: float = 2e-3
    growth: float = 1.15
    h_max: float = 0.1
    x_nodes: Array = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.d < 1.0:
            raise ValueError(f"slab width d={self.d} must be >= 1")
        if not (0 < self.h0 <= self.h_max) or self.growth < 1.0:
            raise ValueError("need 0 < h0 <= h_max and growth >= 1")
        xs = [0.0]
        h = self.h0
        while xs[-1] + h < self.d - 0.5 * min(h, self.h_max):
            xs.append(xs[-1] + h)
            h = min(h * self.growth, self.h_max)
        xs.append(self.d)
        object.__setattr__(self, "x_nodes", np.array(xs))

    @property
    def n_x(self) -> int:
        return self.x_nodes.size

    @property
    def widths(self) -> Array:
        return np.diff(self.x_nodes)


@dataclass(frozen=True)
class WeightSpec:
    """Velocity weight ``<v>^beta exp(vartheta |v|^2)`` with ``<v> = sqrt(1+|v|^2)``."""

    beta: float = 3.0
    vartheta: float = 0.0

    def __post_init__(self) -> None:
        if self.beta < 3.0:
            raise ValueError(f"beta={self.beta} must be >= 3")
        if not 0.0 <= self.vartheta < 0.125:
            raise ValueError(f"vartheta={self.vartheta} must lie in [0, 1/8)")

    def __call__(self, speed2: Array) -> Array:
        speed2 = np.asarray(speed2)
        return (1.0 + speed2) ** (0.5 * self.beta) * np.exp(self.vartheta * speed2)


def weight_norm(values: Array, x: Array, speed2: Array, spec: WeightSpec, sigma: float = 0.0) -> float:
    """``sup_{x,v} e^{sigma x} w(v) |f(x,v)|`` over nodal values of shape (n_x, n_v)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    values = np.atleast_2d(values)
    scale = np.exp(sigma * np.asarray(x))[:, None] * spec(speed2)[None, :]
    return float(np.max(scale * np.abs(values))) if values.size else 0.0


def weighted_profile(values: Array, speed2: Array, spec: WeightSpec) -> Array:
    """Per-node slice ``max_v w(v)|f(x,v)|``."""
    return np.max(spec(speed2)[None, :] * np.abs(values), axis=1)


def gaussian_anchors(grid: VelocityGrid) -> dict[str, float]:
    """Two heat-flux moments of the Maxwellian, exact values 10 and 0.

    ``int v3^2 (|v|^2-3)(|v|^2-5) m dv`` and ``int v3^2 (|v|^2-5) m dv``.
    """
    m = maxwellian(grid.speed2)
    v3sq = grid.v3**2
    return {"v3sq_p3_p5": float(grid.integrate(v3sq * (grid.speed2 - 3.0) * (grid.speed2 - 5.0) * m)),
            "v3sq_p5": float(grid.integrate(v3sq * (grid.speed2 - 5.0) * m))}
