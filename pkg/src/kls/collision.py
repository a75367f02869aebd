"""Hard-sphere linearized collision operator on the cylindrical velocity grid.

The operator commutes with rotations about the wall normal, so ``K`` is
assembled one azimuthal harmonic at a time.  For harmonic ``m`` a node
function is interpolated as

    phi(u) = cos(m theta_u) (u_r / v_a)^p l_a(u_r^2/2) l_b(u_3) sqrt(m(u)) / sqrt(m(v_ab))

(``p = m mod 2``; Lagrange cardinals in ``s = u_r^2/2`` and piecewise in
``u_3``), and
``K phi`` is evaluated at each node by quadrature in spherical coordinates
centred on the node.  The kernel used is the classical reduction of the
hard-sphere gain and loss integrals (Grad's form); rays are split where
they cross ``u_3 = 0`` so the piecewise interpolant never spoils the
quadrature.  A direct ``(v_*, omega)`` quadrature of the collision integral
serves as an independent check and as the engine for the bilinear term.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray
from scipy.special import erf

from .grids import (
    Array,
    AxiGrid,
    NormalRule,
    RadialRule,
    VelocityGrid,
    maxwellian,
    sqrt_maxwellian,
)

_GAIN = 2.0 * np.sqrt(2.0 * np.pi) / np.pi
_NU0 = 4.0 * np.sqrt(2.0 * np.pi)
CACHE_VERSION = "4"


def collision_frequency(speed: Array) -> Array:
    """``nu(|v|) = int int |(v - v_*).omega| m(v_*) d omega d v_*`` in closed form."""
    s = np.asarray(speed, dtype=float)
    safe = np.where(s < 1e-8, 1.0, s)
    val = 2.0 * np.pi * (np.sqrt(2.0 / np.pi) * np.exp(-0.5 * safe**2)
                         + (safe + 1.0 / safe) * erf(safe / np.sqrt(2.0)))
    return np.where(s < 1e-8, _NU0 + (4.0 / 3.0) * np.sqrt(2.0 * np.pi) * s**2, val)


def compute_nu(grid: VelocityGrid | AxiGrid) -> Array:
    return collision_frequency(np.sqrt(grid.speed2))


@dataclass(frozen=True)
class KernelQuadrature:
    """Node-centred quadrature for the kernel integrals."""

    n_polar: int = 48
    n_azimuth: int = 32
    n_rho: int = 32
    rho_pad: float = 9.0

    def key(self) -> str:
        return f"{self.n_polar}:{self.n_azimuth}:{self.n_rho}:{self.rho_pad!r}"


def _frame(v: Array) -> tuple[Array, Array, Array]:
    vn = np.linalg.norm(v)
    e3 = v / vn if vn > 0 else np.array([0.0, 0.0, 1.0])
    trial = np.array([1.0, 0.0, 0.0]) if abs(e3[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(e3, trial)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(e3, e1), e3


def _kernel_points(v: Array, quad: KernelQuadrature) -> tuple[Array, Array, Array]:
    """Quadrature points ``u`` around ``v`` with gain and loss weights.

    Returns ``(u, w_gain, w_loss)`` where ``int k_j(v,u) sqrt(m(u)) p(u) du``
    is approximated by ``sum w_j p(u)``.
    """
    vn = float(np.linalg.norm(v))
    e1, e2, e3 = _frame(v)
    cb, wb = np.polynomial.legendre.leggauss(quad.n_polar)
    phi = (np.arange(quad.n_azimuth) + 0.5) * 2.0 * np.pi / quad.n_azimuth
    sb = np.sqrt(1.0 - cb**2)
    om = (cb[:, None, None] * e3
          + sb[:, None, None] * (np.cos(phi)[None, :, None] * e1 + np.sin(phi)[None, :, None] * e2))
    om = om.reshape(-1, 3)
    wdir = np.repeat(wb, quad.n_azimuth) * (2.0 * np.pi / quad.n_azimuth)
    s = om @ v
    rho_max = np.maximum(0.0, -s) + quad.rho_pad
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = np.where(om[:, 2] * v[2] < 0, -v[2] / om[:, 2], np.inf)
    split = np.minimum(cross, rho_max)
    xg, wg = np.polynomial.legendre.leggauss(quad.n_rho)
    t = 0.5 * (xg + 1.0)
    rho = np.concatenate([t[None, :] * split[:, None],
                          split[:, None] + t[None, :] * (rho_max - split)[:, None]], axis=1)
    wr = np.concatenate([0.5 * wg[None, :] * split[:, None],
                         0.5 * wg[None, :] * (rho_max - split)[:, None]], axis=1)
    ss = s[:, None]
    gauss = np.exp(-0.5 * (rho + ss) ** 2)
    # gain: k2 rho^2 sqrt(m(u)) = C rho exp(-(rho+s)^2/2 - |v|^2/4) (2 pi)^{-3/4}
    g2 = _GAIN * rho * gauss * np.exp(-0.25 * vn**2) * (2.0 * np.pi) ** -0.75
    # loss: k1 rho^2 sqrt(m(u)) = 2 pi rho^3 sqrt(m(v)) m(u)
    g1 = (2.0 * np.pi * rho**3 * (2.0 * np.pi) ** -2.25
          * np.exp(-0.25 * vn**2) * gauss * np.exp(0.5 * ss**2 - 0.5 * vn**2))
    wt = wr * wdir[:, None]
    u = v[None, None, :] + rho[:, :, None] * om[:, None, :]
    return u.reshape(-1, 3), (g2 * wt).ravel(), (g1 * wt).ravel()


def assemble_mode_kernels(
    radial: RadialRule,
    normal: NormalRule,
    modes: Iterable[int],
    quad: KernelQuadrature = KernelQuadrature(),
    split_parts: bool = False,
) -> dict[int, Array] | tuple[dict[int, Array], dict[int, Array]]:
    """Collocation matrices of ``K`` for each azimuthal harmonic.

    Rows and columns follow the ``(radial, normal)`` node order with the
    normal index fastest.  With ``split_parts`` the gain and loss parts are
    returned separately (``K = gain - loss``).
    """
    modes = list(modes)
    vr = radial.nodes
    vz = normal.nodes
    n_r, n_z = vr.size, vz.size
    n = n_r * n_z
    gain = {m: np.zeros((n, n)) for m in modes}
    loss = {m: np.zeros((n, n)) for m in modes}
    r_scale = np.exp(0.25 * vr**2)
    z_scale = np.exp(0.25 * vz**2) * (2.0 * np.pi) ** 0.75
    for a in range(n_r):
        for b in range(n_z):
            i = a * n_z + b
            v = np.array([0.0, vr[a], vz[b]])
            u, w2, w1 = _kernel_points(v, quad)
            ur2 = u[:, 0] ** 2 + u[:, 1] ** 2
            th = np.arctan2(u[:, 0], u[:, 1])
            R = radial.interpolation(0.5 * ur2) * r_scale[None, :]
            Z = normal.interpolation(u[:, 2]) * z_scale[None, :]
            ur = np.sqrt(ur2)
            for m in modes:
                p = m % 2
                ang = np.cos(m * th) * ur**p
                Rm = R / vr[None, :] ** p
                gain[m][i] = ((w2 * ang)[:, None] * Rm).T.__matmul__(Z).ravel()
                loss[m][i] = ((w1 * ang)[:, None] * Rm).T.__matmul__(Z).ravel()
    if split_parts:
        return gain, loss
    return {m: gain[m] - loss[m] for m in modes}


def _projector(basis: Array, weights: Array) -> Array:
    """Weighted-orthogonal projector onto the rows of ``basis``."""
    if basis.size == 0:
        return np.zeros((weights.size, weights.size))
    gram = (basis * weights[None, :]) @ basis.T
    return basis.T @ np.linalg.solve(gram, basis * weights[None, :])


def _symmetry_defect(L: Array, weights: Array) -> float:
    sq = np.sqrt(weights)
    S = sq[:, None] * L / sq[None, :]
    return float(np.linalg.norm(S - S.T) / np.linalg.norm(S))


@dataclass
class ModeBlock:
    """Operator restricted to one azimuthal harmonic on the (v_r, v3) plane."""

    m: int
    nu: Array
    K: Array
    weights: Array
    null: Array
    raw_null_residual: float
    raw_symmetry_defect: float
    K_raw: Array | None = None

    @property
    def L(self) -> Array:
        return np.diag(self.nu) - self.K


def _smooth_basis(power: int, vr: Array, vz: Array, n_r: int, n_z: int) -> Array:
    """Orthonormal columns spanning ``v_r^power s^i v3^j sqrt(m)`` for ``i < n_r/2, j < n_z/2``."""
    s = 0.5 * vr**2
    sm = sqrt_maxwellian(vr**2 + vz**2)
    cols = [vr**power * s**i * vz**j * sm for i in range(max(n_r // 2, 1)) for j in range(max(n_z // 2, 1))]
    q, _ = np.linalg.qr(np.array(cols).T)
    return q


def _correct_block(
    m: int, nu: Array, K_raw: Array, weights: Array, null: Array, smooth: Array | None = None
) -> ModeBlock:
    """Make the collocated block exactly self-adjoint and exactly annihilate ``null``.

    With ``M = D L_raw`` (``D`` the quadrature weights), the antisymmetric
    part ``A = M - M^T`` is removed by a symmetric correction chosen so that
    the action on the span of ``smooth`` stays that of the raw collocation
    (to the size of the asymmetry of ``M`` on that span).  Plain averaging
    of ``L_raw`` with its adjoint would instead mix in the poorly resolved
    column quadrature.  The result is then compressed onto the complement
    of the null space.
    """
    L_raw = np.diag(nu) - K_raw
    res = 0.0
    for chi in null:
        den = np.sqrt(np.sum(weights * chi**2))
        res = max(res, float(np.sqrt(np.sum(weights * (L_raw @ chi) ** 2)) / den))
    defect = _symmetry_defect(L_raw, weights)
    M = weights[:, None] * L_raw
    M_sym = 0.5 * (M + M.T)
    if smooth is not None:
        B = 0.5 * (M - M.T) @ smooth
        S = B @ smooth.T + smooth @ B.T - smooth @ (smooth.T @ B) @ smooth.T
        M_sym = M_sym + 0.5 * (S + S.T)
    L_sym = M_sym / weights[:, None]
    P = _projector(null, weights)
    Q = np.eye(nu.size) - P
    L = Q @ L_sym @ Q
    L = 0.5 * (L + (L.T * weights[None, :]) / weights[:, None])
    return ModeBlock(m, nu, np.diag(nu) - L, weights, null, res, defect, K_raw)


def _plane_null(m: int, vr: Array, vz: Array) -> Array:
    sp2 = vr**2 + vz**2
    sm = sqrt_maxwellian(sp2)
    if m == 0:
        return np.stack([sm, vz * sm, 0.5 * (sp2 - 3.0) * sm])
    if m == 1:
        return (vr * sm)[None, :]
    return np.zeros((0, vr.size))


def default_cache_dir() -> Path:
    return Path(os.environ.get("KLS_CACHE", Path.home() / ".cache" / "kls"))


def _cached_kernels(tag: str, build: Callable[[], dict[int, Array]], cache_dir: Path | None) -> dict[int, Array]:
    if cache_dir is None:
        return build()
    path = Path(cache_dir) / f"{hashlib.sha256(tag.encode()).hexdigest()[:20]}.npz"
    if path.exists():
        with np.load(path) as data:
            return {int(k[1:]): data[k] for k in data.files}
    out = build()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **{f"m{m}": v for m, v in out.items()})
    os.replace(tmp, path)
    return out


class OperatorError(RuntimeError):
    """Assembled operator violates a structural invariant."""


def azimuthal_modes(n_theta: int) -> list[tuple[int, str]]:
    """Real azimuthal basis: (0,'cos'), (1,'cos'), (1,'sin'), ..., Nyquist."""
    out = [(0, "cos")]
    for m in range(1, (n_theta - 1) // 2 + 1):
        out += [(m, "cos"), (m, "sin")]
    if n_theta % 2 == 0:
        out.append((n_theta // 2, "sin"))
    return out


def _ring_pattern(m: int, parity: str, theta: Array) -> Array:
    return np.cos(m * theta) if parity == "cos" else np.sin(m * theta)


def mode_analysis(values: Array, grid: VelocityGrid, m: int, parity: str) -> Array:
    """Coefficient function on the (v_r, v3) plane of one real harmonic."""
    vals = np.asarray(values).reshape(values.shape[:-1] + (grid.n_r * grid.n_z, grid.n_theta))
    pat = _ring_pattern(m, parity, grid.theta)
    norm = np.sum(pat**2)
    return vals @ pat / norm


def mode_synthesis(coeff: Array, grid: VelocityGrid, m: int, parity: str) -> Array:
    pat = _ring_pattern(m, parity, grid.theta)
    out = np.asarray(coeff)[..., None] * pat
    return out.reshape(out.shape[:-2] + (grid.size,))


class CollisionOperator:
    """``L = nu - K`` on a :class:`VelocityGrid` with projector and pseudo-inverse."""

    def __init__(self, grid: VelocityGrid, blocks: dict[int, ModeBlock], assembly_seconds: float = 0.0):
        self.grid = grid
        self.blocks = blocks
        self.assembly_seconds = assembly_seconds
        self.nu = compute_nu(grid)
        self._K: Array | None = None
        self._lu = None
        self._hydro: HydroFields | None = None
        self._c0: float | None = None

    @classmethod
    def assemble(
        cls,
        grid: VelocityGrid,
        quad: KernelQuadrature = KernelQuadrature(),
        cache_dir: Path | None | str = "default",
        null_tol: float = 1e-6,
    ) -> "CollisionOperator":
        t0 = time.perf_counter()
        if cache_dir == "default":
            cache_dir = default_cache_dir()
        modes = range(grid.n_theta // 2 + 1)
        tag = f"{CACHE_VERSION}|full|{grid.n_r}|{grid.n_z}|{grid.v_max!r}|{list(modes)}|{quad.key()}"
        raw = _cached_kernels(tag, lambda: assemble_mode_kernels(grid.radial, grid.normal, modes, quad),
                              None if cache_dir is None else Path(cache_dir))
        vr = np.repeat(grid.radial.nodes, grid.n_z)
        vz = np.tile(grid.normal.nodes, grid.n_r)
        nu = collision_frequency(np.sqrt(vr**2 + vz**2))
        pw = grid.plane_weights
        blocks = {}
        for m in modes:
            blocks[m] = _correct_block(m, nu, raw[m], pw, _plane_null(m, vr, vz),
                                       _smooth_basis(m, vr, vz, grid.n_r, grid.n_z))
        worst = max(b.raw_null_residual for b in blocks.values())
        if worst > null_tol:
            raise OperatorError(f"null-space residual {worst:.3e} exceeds {null_tol:.1e}; refine the grid")
        return cls(grid, blocks, time.perf_counter() - t0)

    # -- dense representation -------------------------------------------------
    @property
    def K(self) -> Array:
        if self._K is None:
            g = self.grid
            n = g.n_theta
            dth = g.theta[:, None] - g.theta[None, :]
            K = np.zeros((g.size, g.size))
            for m, blk in self.blocks.items():
                wm = 1.0 / n if (m == 0 or 2 * m == n) else 2.0 / n
                K += np.kron(blk.K, wm * np.cos(m * dth))
            self._K = K
        return self._K

    @property
    def L(self) -> Array:
        return np.diag(self.nu) - self.K

    def apply(self, f: Array) -> Array:
        """``L f`` along the last axis."""
        return self.nu * f - f @ self.K.T

    def apply_K(self, f: Array) -> Array:
        return f @ self.K.T

    # -- macroscopic structure -------------------------------------------------
    @property
    def basis_N(self) -> Array:
        g = self.grid
        sm = g.sqrt_m
        v = g.nodes
        return np.stack([sm, v[:, 0] * sm, v[:, 1] * sm, v[:, 2] * sm, 0.5 * (g.speed2 - 3.0) * sm])

    @property
    def P(self) -> Array:
        return _projector(self.basis_N, self.grid.weights)

    def macro_coefficients(self, f: Array) -> Array:
        """(a, b1, b2, b3, c) with ``P f = (a + b.v + c(|v|^2-3)/2) sqrt(m)``."""
        B = self.basis_N
        W = self.grid.weights
        gram = (B * W) @ B.T
        return np.linalg.solve(gram, (B * W) @ np.asarray(f).T).T

    def project_P(self, f: Array) -> Array:
        return self.macro_coefficients(f) @ self.basis_N

    def inner(self, f: Array, g: Array) -> float:
        return float(np.sum(self.grid.weights * f * g))

    def pseudo_inverse(self, g: Array, tol: float = 1e-8) -> Array:
        g = np.asarray(g, dtype=float)
        scale = max(np.sqrt(self.inner(g, g)), 1e-300)
        pg = self.project_P(g)
        if np.sqrt(self.inner(pg, pg)) > tol * scale:
            raise ValueError("pseudo_inverse: source has a macroscopic component")
        if self._lu is None:
            self._lu = sla.lu_factor(self.L + self.P)
        x = sla.lu_solve(self._lu, g - pg)
        return x - self.project_P(x)

    # -- diagnostics -------------------------------------------------------------
    def null_residuals(self) -> Array:
        W = self.grid.weights
        out = []
        for chi in self.basis_N:
            out.append(np.sqrt(np.sum(W * self.apply(chi) ** 2) / np.sum(W * chi**2)))
        return np.array(out)

    def raw_null_residual(self) -> float:
        return max(b.raw_null_residual for b in self.blocks.values())

    def raw_symmetry_defect(self) -> float:
        return max(b.raw_symmetry_defect for b in self.blocks.values())

    def symmetry_defect(self, n_pairs: int = 50, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        W = self.grid.weights
        L = self.L
        worst = 0.0
        for _ in range(n_pairs):
            f = rng.standard_normal(W.size) * self.grid.sqrt_m
            g = rng.standard_normal(W.size) * self.grid.sqrt_m
            a = np.sum(W * (L @ f) * g)
            b = np.sum(W * f * (L @ g))
            nf = np.sqrt(np.sum(W * f * f))
            ng = np.sqrt(np.sum(W * g * g))
            lf = np.sqrt(np.sum(W * (L @ f) ** 2))
            worst = max(worst, abs(a - b) / (lf * ng + 1e-300), 0.0 * nf)
        return float(worst)

    @property
    def c0_est(self) -> float:
        """Smallest ``<Lf,f>/<nu f,f>`` over f orthogonal to the null space."""
        if self._c0 is None:
            vals = []
            for blk in self.blocks.values():
                A = blk.weights[:, None] * blk.L
                A = 0.5 * (A + A.T)
                B = np.diag(blk.weights * blk.nu)
                ev = sla.eigh(A, B, eigvals_only=True)
                vals.append(ev[blk.null.shape[0]:].min())
            self._c0 = float(min(vals))
        return self._c0

    def nu_bounds(self) -> tuple[float, float]:
        ratio = self.nu / (1.0 + self.grid.speed)
        return float(ratio.min()), float(ratio.max())

    @property
    def hydro(self) -> "HydroFields":
        if self._hydro is None:
            self._hydro = HydroFields.build(self)
        return self._hydro


@dataclass
class HydroFields:
    """``A_ij``, ``B_i``, their pseudo-inverse images and the transport constants."""

    A: Array
    B: Array
    A_hat: Array
    B_hat: Array
    a_A: Array
    b_B: Array
    kappa1: float
    kappa2: float
    kappa1_pairs: dict[str, float]
    kappa2_components: list[float]

    @classmethod
    def build(cls, op: CollisionOperator) -> "HydroFields":
        g = op.grid
        v = g.nodes
        sm = g.sqrt_m
        sp2 = g.speed2
        A = np.zeros((3, 3, g.size))
        for i in range(3):
            for j in range(3):
                A[i, j] = (v[:, i] * v[:, j] - (sp2 / 3.0 if i == j else 0.0)) * sm
        B = np.stack([0.5 * (sp2 - 5.0) * v[:, i] * sm for i in range(3)])
        A_hat = np.zeros_like(A)
        for i in range(3):
            for j in range(i, 3):
                A_hat[i, j] = A_hat[j, i] = op.pseudo_inverse(A[i, j])
        B_hat = np.stack([op.pseudo_inverse(B[i]) for i in range(3)])
        W = g.weights
        pairs = {f"{i + 1}{j + 1}": float(np.sum(W * A[i, j] * A_hat[i, j]))
                 for i in range(3) for j in range(i + 1, 3)}
        k2 = [float(np.sum(W * B[i] * B_hat[i])) for i in range(3)]
        a_A = np.einsum("ijn,ijn->n", A_hat, A) / np.einsum("ijn,ijn->n", A, A)
        b_B = np.einsum("in,in->n", B_hat, B) / np.maximum(np.einsum("in,in->n", B, B), 1e-300)
        return cls(A, B, A_hat, B_hat, a_A, b_B, float(np.mean(list(pairs.values()))),
                   float(np.mean(k2)), pairs, k2)

    def isotropy_residual(self) -> tuple[float, float]:
        """Relative misfit of ``A_hat - a_A A`` and ``B_hat - b_B B``."""
        ra = np.linalg.norm(self.A_hat - self.a_A * self.A) / np.linalg.norm(self.A_hat)
        rb = np.linalg.norm(self.B_hat - self.b_B * self.B) / np.linalg.norm(self.B_hat)
        return float(ra), float(rb)


def compute_kappas(op: CollisionOperator) -> tuple[float, float]:
    h = op.hydro
    return h.kappa1, h.kappa2


class ReducedOperator:
    """``L^S`` defined by ``L(v_1 phi) = v_1 L^S phi`` on an :class:`AxiGrid`.

    Node functions ``phi(v_r, v3)``; inner product weights are those of
    ``dmu = v_r^3 dv_r dv3``.
    """

    def __init__(self, axi: AxiGrid, nuS: Array, KS: Array, raw_null_residual: float,
                 raw_symmetry_defect: float):
        self.axi = axi
        self.nuS = nuS
        self.KS = KS
        self.raw_null_residual = raw_null_residual
        self.raw_symmetry_defect = raw_symmetry_defect

    @property
    def L(self) -> Array:
        return np.diag(self.nuS) - self.KS

    def apply(self, phi: Array) -> Array:
        return self.nuS * phi - phi @ self.KS.T

    def pseudo_inverse(self, g: Array) -> Array:
        W = self.axi.weights
        sm = self.axi.sqrt_m
        P = np.outer(sm, sm * W) / np.sum(W * sm * sm)
        x = np.linalg.solve(self.L + P, g - P @ g)
        return x - P @ x


def assemble_LS(
    axi: AxiGrid,
    quad: KernelQuadrature = KernelQuadrature(),
    cache_dir: Path | None | str = "default",
    null_tol: float = 1e-6,
) -> ReducedOperator:
    if cache_dir == "default":
        cache_dir = default_cache_dir()
    tag = f"{CACHE_VERSION}|axi|{axi.n_r}|{axi.n_z}|{axi.v_max!r}|{quad.key()}"
    raw = _cached_kernels(tag, lambda: assemble_mode_kernels(axi.radial, axi.normal, [1], quad),
                          None if cache_dir is None else Path(cache_dir))[1]
    vr = axi.v_r
    nu = collision_frequency(np.sqrt(axi.speed2))
    KS_raw = raw * vr[None, :] / vr[:, None]
    null = axi.sqrt_m[None, :]
    blk = _correct_block(1, nu, KS_raw, axi.weights, null, _smooth_basis(0, vr, axi.v3, axi.n_r, axi.n_z))
    if blk.raw_null_residual > null_tol:
        raise OperatorError(f"reduced null residual {blk.raw_null_residual:.3e} exceeds {null_tol:.1e}")
    return ReducedOperator(axi, nu, blk.K, blk.raw_null_residual, blk.raw_symmetry_defect)


# ---------------------------------------------------------------------------
# velocity models consumed by the slab solver
# ---------------------------------------------------------------------------

@dataclass
class VelocityModel:
    """A discrete velocity set with its collision matrix, as seen by the slab solver.

    ``chi`` holds the collision invariants present in the model keyed by the
    macroscopic name (a, b1, b2, b3, c); ``psi`` holds the far-field test
    functions (v3 sqrt(m), A_hat_31, A_hat_32, B_hat_3) keyed by the unknown
    they determine; ``flux_tests`` holds A_13, A_23, B_3 when present.
    Inner products are ``sum(weights * f * g)``, consistent with the full
    3D integral of the represented function.
    """

    label: str
    v3: Array
    nu: Array
    K: Array
    weights: Array
    reflection: NDArray[np.int64]
    speed2: Array
    chi: dict[str, Array]
    psi: dict[str, Array]
    flux_tests: dict[str, Array]
    density_trace: Array | None = None
    mode: tuple[int, str] | None = None
    axi_grid: AxiGrid | None = None

    @property
    def size(self) -> int:
        return self.v3.size

    @property
    def incoming(self) -> NDArray[np.bool_]:
        return self.v3 > 0

    def apply_K(self, f: Array) -> Array:
        return f @ self.K.T

    def apply_L(self, f: Array) -> Array:
        return self.nu * f - f @ self.K.T

    def inner(self, f: Array, g: Array) -> Array:
        return np.sum(self.weights * f * g, axis=-1)

    def macro(self, f: Array) -> dict[str, Array]:
        names = list(self.chi)
        if not names:
            return {}
        B = np.stack([self.chi[k] for k in names])
        gram = (B * self.weights) @ B.T
        coef = np.linalg.solve(gram, (B * self.weights) @ np.atleast_2d(f).T)
        return {k: coef[i] for i, k in enumerate(names)}

    def project(self, f: Array) -> Array:
        mac = self.macro(f)
        out = np.zeros_like(np.atleast_2d(f), dtype=float)
        for k, c in mac.items():
            out += c[:, None] * self.chi[k][None, :]
        return out.reshape(np.shape(f))


def _mode_hydro(blk: ModeBlock, rhs: Array) -> Array:
    P = _projector(blk.null, blk.weights)
    x = np.linalg.solve(blk.L + P, rhs - P @ rhs)
    return x - P @ x


def model_from_mode(op: CollisionOperator, m: int, parity: str = "cos") -> VelocityModel:
    """Slab model for one real azimuthal harmonic of the full operator."""
    g = op.grid
    blk = op.blocks[m]
    vr = np.repeat(g.radial.nodes, g.n_z)
    vz = np.tile(g.normal.nodes, g.n_r)
    sp2 = vr**2 + vz**2
    sm = sqrt_maxwellian(sp2)
    ring = np.sum(_ring_pattern(m, parity, g.theta) ** 2) * 2.0 * np.pi / g.n_theta
    w = g.plane_weights * ring
    refl = np.arange(vr.size).reshape(g.n_r, g.n_z)[:, ::-1].ravel()
    chi: dict[str, Array] = {}
    psi: dict[str, Array] = {}
    flux: dict[str, Array] = {}
    dens = None
    if m == 0:
        chi = {"a": sm, "b3": vz * sm, "c": 0.5 * (sp2 - 3.0) * sm}
        B3 = 0.5 * (sp2 - 5.0) * vz * sm
        psi = {"a": vz * sm, "c": _mode_hydro(blk, B3)}
        flux = {"B3": B3}
        dens = sm
    elif m == 1:
        name = "b1" if parity == "sin" else "b2"
        chi = {name: vr * sm}
        A3 = vr * vz * sm
        psi = {name: _mode_hydro(blk, A3)}
        flux = {"A13" if parity == "sin" else "A23": A3}
    return VelocityModel(f"mode{m}{parity}", vz, blk.nu, blk.K, w, refl, sp2, chi, psi, flux,
                         dens, (m, parity))


def model_full(op: CollisionOperator) -> VelocityModel:
    """Slab model on the whole 3D grid (dense operator)."""
    g = op.grid
    sm = g.sqrt_m
    v = g.nodes
    h = op.hydro
    chi = {"a": sm, "b1": v[:, 0] * sm, "b2": v[:, 1] * sm, "b3": v[:, 2] * sm,
           "c": 0.5 * (g.speed2 - 3.0) * sm}
    psi = {"a": v[:, 2] * sm, "b1": h.A_hat[2, 0], "b2": h.A_hat[2, 1], "c": h.B_hat[2]}
    flux = {"A13": h.A[0, 2], "A23": h.A[1, 2], "B3": h.B[2]}
    return VelocityModel("full", g.v3, op.nu, op.K, g.weights, g.reflection_map, g.speed2,
                         chi, psi, flux, sm, None)


def model_reduced(opS: ReducedOperator) -> VelocityModel:
    """Slab model for ``phi`` with ``f = v_1 phi`` (inner products carry the factor pi)."""
    axi = opS.axi
    sm = axi.sqrt_m
    w = np.pi * axi.weights
    v3 = axi.v3
    psi = {"b1": opS.pseudo_inverse(v3 * sm)}
    return VelocityModel("reduced", v3, opS.nuS, opS.KS, w, axi.reflection_map, axi.speed2,
                         {"b1": sm}, psi, {"A13": v3 * sm}, None, (1, "sin"), axi)


# ---------------------------------------------------------------------------
# direct (v_*, omega) quadrature and the bilinear term
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollisionQuadrature:
    """Product rule for ``int dv_* int d omega`` centred on the evaluation point."""

    n_rho: int = 20
    n_polar: int = 12
    n_azimuth: int = 16
    n_cone: int = 6
    n_cone_azimuth: int = 12
    rho_pad: float = 12.0

    def key(self) -> str:
        return (f"{self.n_rho}:{self.n_polar}:{self.n_azimuth}:{self.n_cone}:"
                f"{self.n_cone_azimuth}:{self.rho_pad!r}")


def _collision_points(v: Array, q: CollisionQuadrature) -> tuple[Array, Array, Array, Array]:
    """Points for ``int int |(v_*-v).omega| F dω dv_*`` at fixed ``v``.

    Returns (v_star, v_star_post, v_post, weight) with the hemisphere
    ``(v_*-v).omega > 0`` doubled, weights already containing
    ``|(v_*-v).omega|`` and the Jacobian.
    """
    e1, e2, e3 = _frame(v)
    cb, wb = np.polynomial.legendre.leggauss(q.n_polar)
    phi = (np.arange(q.n_azimuth) + 0.5) * 2.0 * np.pi / q.n_azimuth
    sb = np.sqrt(1.0 - cb**2)
    uh = (cb[:, None, None] * e3
          + sb[:, None, None] * (np.cos(phi)[None, :, None] * e1 + np.sin(phi)[None, :, None] * e2))
    uh = uh.reshape(-1, 3)
    wu = np.repeat(wb, q.n_azimuth) * (2.0 * np.pi / q.n_azimuth)
    s = uh @ v
    xg, wg = np.polynomial.legendre.leggauss(q.n_rho)
    rmax = np.maximum(0.0, -s) + q.rho_pad
    rho = 0.5 * (xg[None, :] + 1.0) * rmax[:, None]
    wr = 0.5 * wg[None, :] * rmax[:, None]
    cc, wc = np.polynomial.legendre.leggauss(q.n_cone)
    cc = 0.5 * (cc + 1.0)
    wc = 0.5 * wc
    psi = (np.arange(q.n_cone_azimuth) + 0.5) * 2.0 * np.pi / q.n_cone_azimuth
    n_dir = uh.shape[0]
    pts_s, pts_sp, pts_p, wts = [], [], [], []
    for k in range(n_dir):
        f1, f2, f3 = _frame(uh[k])
        sc = np.sqrt(1.0 - cc**2)
        om = (cc[:, None, None] * f3
              + sc[:, None, None] * (np.cos(psi)[None, :, None] * f1 + np.sin(psi)[None, :, None] * f2))
        om = om.reshape(-1, 3)
        wom = np.repeat(wc * cc, q.n_cone_azimuth) * (2.0 * np.pi / q.n_cone_azimuth) * 2.0
        r = rho[k][:, None, None]
        vs = v[None, None, :] + r * uh[k][None, None, :]
        dot = r * np.repeat(cc, q.n_cone_azimuth)[None, :, None]
        vp = v[None, None, :] + dot * om[None, :, :]
        vsp = vs - dot * om[None, :, :]
        w = (wu[k] * wr[k] * rho[k] ** 3)[:, None] * wom[None, :]
        shape = (-1, 3)
        pts_s.append(np.broadcast_to(vs, vp.shape).reshape(shape))
        pts_sp.append(vsp.reshape(shape))
        pts_p.append(vp.reshape(shape))
        wts.append(w.ravel())
    return (np.concatenate(pts_s), np.concatenate(pts_sp), np.concatenate(pts_p),
            np.concatenate(wts))


def gamma_direct(
    f: Callable[[Array], Array],
    g: Callable[[Array], Array],
    points: Array,
    quad: CollisionQuadrature = CollisionQuadrature(),
) -> Array:
    """``Gamma(f, g)`` at arbitrary points for callables ``f, g`` of velocity arrays (n, 3)."""
    out = np.zeros(len(points))
    for i, v in enumerate(np.atleast_2d(points)):
        vs, vsp, vp, w = _collision_points(v, quad)
        smv = sqrt_maxwellian(np.sum(vs**2, axis=1))
        gain = np.sum(w * smv * f(vsp) * g(vp))
        loss = np.sum(w * smv * f(vs)) * g(v[None, :])[0]
        out[i] = gain - loss
    return out


def linearized_direct(
    f: Callable[[Array], Array], points: Array, quad: CollisionQuadrature = CollisionQuadrature()
) -> Array:
    """``L f = -(Gamma(sqrt m, f) + Gamma(f, sqrt m))`` by direct quadrature."""
    sm = lambda u: sqrt_maxwellian(np.sum(u**2, axis=1))  # noqa: E731
    return -(gamma_direct(sm, f, points, quad) + gamma_direct(f, sm, points, quad))


class GammaOperator:
    """Bilinear term for axisymmetric fields on the (v_r, v3) plane of a grid.

    ``Gamma(f, g)_i = sum_jk T[i, j, k] f_j g_k`` with the gain tensor built
    by direct quadrature and the loss part from the collocated loss kernel.
    """

    def __init__(self, grid: VelocityGrid, T: Array, weights: Array, null: Array):
        self.grid = grid
        self.T = T
        self.weights = weights
        self.null = null
        self._P = _projector(null, weights)

    @classmethod
    def assemble(
        cls,
        grid: VelocityGrid,
        quad: CollisionQuadrature = CollisionQuadrature(),
        kquad: KernelQuadrature = KernelQuadrature(),
        cache_dir: Path | None | str = "default",
    ) -> "GammaOperator":
        if cache_dir == "default":
            cache_dir = default_cache_dir()
        tag = f"{CACHE_VERSION}|gamma|{grid.n_r}|{grid.n_z}|{grid.v_max!r}|{quad.key()}|{kquad.key()}"
        n_r, n_z = grid.n_r, grid.n_z
        vr = np.repeat(grid.radial.nodes, n_z)
        vz = np.tile(grid.normal.nodes, n_r)
        n = vr.size

        def build() -> dict[int, Array]:
            _, loss = assemble_mode_kernels(grid.radial, grid.normal, [0], kquad, split_parts=True)
            r_scale = np.exp(0.25 * grid.radial.nodes**2)
            z_scale = np.exp(0.25 * grid.normal.nodes**2) * (2.0 * np.pi) ** 0.75

            def basis(u: Array) -> Array:
                R = grid.radial.interpolation(0.5 * (u[:, 0] ** 2 + u[:, 1] ** 2)) * r_scale
                Z = grid.normal.interpolation(u[:, 2]) * z_scale
                return (R[:, :, None] * Z[:, None, :]).reshape(u.shape[0], n)

            T = np.zeros((n, n, n))
            for i in range(n):
                v = np.array([0.0, vr[i], vz[i]])
                vs, vsp, vp, w = _collision_points(v, quad)
                ms = maxwellian(np.sum(vs**2, axis=1))
                c = w * ms * sqrt_maxwellian(vr[i] ** 2 + vz[i] ** 2)
                chunk = 200_000
                for s0 in range(0, c.size, chunk):
                    sl = slice(s0, s0 + chunk)
                    T[i] += (c[sl, None] * basis(vsp[sl])).T @ basis(vp[sl])
            sm = sqrt_maxwellian(vr**2 + vz**2)
            idx = np.arange(n)
            T[idx, :, idx] -= loss[0] / sm[:, None]
            return {0: T}

        T = _cached_kernels(tag, build, None if cache_dir is None else Path(cache_dir))[0]
        null = _plane_null(0, vr, vz)
        return cls(grid, T, grid.plane_weights * 2.0 * np.pi, null)

    def __call__(self, f: Array, g: Array, conservative: bool = True) -> Array:
        """Evaluate along the last axis; batched inputs share leading axes."""
        out = np.einsum("ijk,...j,...k->...i", self.T, f, g, optimize=True)
        if conservative:
            out = out - out @ self._P.T
        return out


def gamma_bilinear(gamma: GammaOperator, f: Array, g: Array) -> Array:
    return gamma(f, g)
