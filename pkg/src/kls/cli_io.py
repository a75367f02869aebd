"""Command-line front end: configuration, run orchestration and artifact emission.

``kls operators|solve|slip|verify --config <path> --out <dir> [--seed N] [--threads N]``

Exit codes: 0 pass, 2 validation error, 3 convergence failure, 4 invariant
violation.  File layouts are described in ``docs/formats.md``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .boundary import BoundarySpec, SolvabilityError
from .collision import (
    CollisionOperator,
    GammaOperator,
    OperatorError,
    ReducedOperator,
    VelocityModel,
    assemble_LS,
    model_from_mode,
    model_reduced,
)
from .fluid_limit import (
    SlipResult,
    compute_slip,
    phi_theta_data,
    phi_u_data,
    solve_phi_u_lifted,
    zeroth_order_wall_kernel,
)
from .grids import Array, AxiGrid, VelocityGrid, WeightSpec, gaussian_anchors, weighted_profile
from .nonlinear import NonlinearConfig, PicardDivergence, fine_correction, solve_nonlinear
from .slab_solver import (
    ConvergenceError,
    KLResult,
    SlabField,
    SolverConfig,
    SourceFn,
    compute_q,
    extract_macro,
    solve_direct,
    solve_fixed_point,
    solve_KL,
    solve_slab,
    verify_lambda_independence,
)

log = logging.getLogger("kls")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_INVARIANT = 0, 2, 3, 4
PRESETS = ("zero", "phi-theta", "phi-u", "csv")
_SQRT_2PI = math.sqrt(2.0 * math.pi)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_pos = {"type": "number", "exclusiveMinimum": 0}
_pos_list = {"type": "array", "items": _pos, "minItems": 1}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_r": {"type": "integer", "minimum": 4},
                "n_z": {"type": "integer", "minimum": 4},
                "n_theta": {"type": "integer", "minimum": 6},
                "v_max": {"type": "number", "minimum": 5},
                "axi_n_r": {"type": "integer", "minimum": 4},
                "axi_n_z": {"type": "integer", "minimum": 4},
                "coarse_n_r": {"type": "integer", "minimum": 4},
                "coarse_n_z": {"type": "integer", "minimum": 4},
            },
        },
        "slab": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "d_schedule": _pos_list,
                "h0": _pos, "growth": {"type": "number", "minimum": 1}, "h_max": _pos,
                "min_d_points": {"type": "integer", "minimum": 1},
            },
        },
        "physics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "alpha_sweep": {"type": "array",
                                "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
                "beta": {"type": "number", "minimum": 3},
                "vartheta": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.125},
                "sigma0": _pos,
                "lam": {"type": "number"},
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["direct", "constructive"]},
                "eps_schedule": _pos_list,
                "a_schedule": {"type": "array", "items": {"type": "number"}, "minItems": 2},
                "fp_tol": _pos, "macro_tol": _pos, "q_tol": _pos, "solvability_tol": _pos,
                "max_iters": {"type": "integer", "minimum": 1},
                "warmup_iters": {"type": "integer", "minimum": 0},
            },
        },
        "source": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "preset": {"enum": list(PRESETS)},
                "g_csv": {"type": ["string", "null"]},
                "r_csv": {"type": ["string", "null"]},
                "harmonic": {"type": "integer", "enum": [0, 1]},
                "parity": {"enum": ["cos", "sin"]},
                "scale": {"type": "number"},
                "nonlinear": {"type": "boolean"},
            },
        },
        "nonlinear": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "delta_max": _pos, "picard_tol": _pos,
                "max_picard_iters": {"type": "integer", "minimum": 1},
                "d": {"type": "number", "minimum": 1},
                "fine_correction": {"type": "boolean"},
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"svg": {"type": "boolean"}},
        },
        "cache_dir": {"type": ["string", "null"]},
    },
}


@dataclass
class GridBlock:
    n_r: int = 8
    n_z: int = 16
    n_theta: int = 8
    v_max: float = 7.0
    axi_n_r: int = 8
    axi_n_z: int = 16
    coarse_n_r: int = 6
    coarse_n_z: int = 8


@dataclass
class SlabBlock:
    d_schedule: list[float] = field(default_factory=lambda: [1.25, 2.5, 5.0])
    h0: float = 2e-3
    growth: float = 1.15
    h_max: float = 0.1
    min_d_points: int = 3


@dataclass
class PhysicsBlock:
    alpha: float = 1.0
    alpha_sweep: list[float] = field(default_factory=list)
    beta: float = 3.0
    vartheta: float = 0.0
    sigma0: float = 1.0
    lam: float = 0.0


@dataclass
class SolverBlock:
    mode: str = "direct"
    eps_schedule: list[float] = field(default_factory=lambda: [0.1, 0.01, 0.001])
    a_schedule: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    fp_tol: float = 1e-11
    macro_tol: float = 1e-6
    q_tol: float = 1e-4
    solvability_tol: float = 1e-8
    max_iters: int = 400
    warmup_iters: int = 4


@dataclass
class SourceBlock:
    preset: str = "phi-theta"
    g_csv: str | None = None
    r_csv: str | None = None
    harmonic: int = 0
    parity: str = "cos"
    scale: float = 1.0
    nonlinear: bool = False


@dataclass
class NonlinearBlock:
    delta_max: float = 0.1
    picard_tol: float = 1e-10
    max_picard_iters: int = 40
    d: float = 2.5
    fine_correction: bool = False


@dataclass
class OutputBlock:
    svg: bool = False


@dataclass
class RunConfig:
    """Validated run configuration; every block has defaults."""

    grid: GridBlock = field(default_factory=GridBlock)
    slab: SlabBlock = field(default_factory=SlabBlock)
    physics: PhysicsBlock = field(default_factory=PhysicsBlock)
    solver: SolverBlock = field(default_factory=SolverBlock)
    source: SourceBlock = field(default_factory=SourceBlock)
    nonlinear: NonlinearBlock = field(default_factory=NonlinearBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    cache_dir: str | None = "default"

    # -- builders ----------------------------------------------------------------
    def solver_config(self) -> SolverConfig:
        s, b = self.solver, self.slab
        return SolverConfig(
            eps_schedule=tuple(s.eps_schedule), a_schedule=tuple(s.a_schedule),
            d_schedule=tuple(b.d_schedule), fp_tol=s.fp_tol, macro_tol=s.macro_tol, q_tol=s.q_tol,
            max_iters=s.max_iters, mode=s.mode, sigma0=self.physics.sigma0, h0=b.h0,
            growth=b.growth, h_max=b.h_max, warmup_iters=s.warmup_iters, min_d_points=b.min_d_points)

    def velocity_grid(self) -> VelocityGrid:
        g = self.grid
        return VelocityGrid(g.n_r, g.n_z, g.v_max, g.n_theta)

    def axi_grid(self) -> AxiGrid:
        g = self.grid
        return AxiGrid(g.axi_n_r, g.axi_n_z, g.v_max)

    def coarse_grid(self) -> VelocityGrid:
        g = self.grid
        return VelocityGrid(g.coarse_n_r, g.coarse_n_z, g.v_max, g.n_theta)

    def weight(self) -> WeightSpec:
        return WeightSpec(self.physics.beta, self.physics.vartheta)

    def nonlinear_config(self) -> NonlinearConfig:
        n = self.nonlinear
        return NonlinearConfig(n.delta_max, n.picard_tol, n.max_picard_iters, n.d, self.weight())

    def cache(self) -> str | None:
        return self.cache_dir

    def to_dict(self) -> dict:
        return asdict(self)


class ConfigError(ValueError):
    """Invalid configuration; ``messages`` are ``"<field path>: <problem>"`` strings."""

    def __init__(self, messages: list[str]):
        self.messages = messages
        super().__init__("; ".join(messages))


_BLOCKS = {"grid": GridBlock, "slab": SlabBlock, "physics": PhysicsBlock, "solver": SolverBlock,
           "source": SourceBlock, "nonlinear": NonlinearBlock, "output": OutputBlock}


def _semantic_checks(cfg: RunConfig) -> list[str]:
    msgs: list[str] = []
    g = cfg.grid
    for name in ("n_z", "axi_n_z", "coarse_n_z"):
        if getattr(g, name) % 2:
            msgs.append(f"grid.{name}: must be even (no node on the grazing plane v3 = 0)")
    if g.n_theta % 2:
        msgs.append("grid.n_theta: must be even")
    try:
        cfg.solver_config().validate()
    except ValueError as exc:
        text = str(exc)
        key = text.split()[0]
        block = "slab" if key in ("d_schedule", "h0", "h_max") else (
            "physics" if key == "sigma0" else "solver")
        msgs.append(f"{block}.{key}: {text}")
    if cfg.slab.h_max < cfg.slab.h0:
        msgs.append("slab.h_max: must be >= slab.h0")
    src = cfg.source
    if src.preset == "csv":
        if src.g_csv is None and src.r_csv is None:
            msgs.append("source.g_csv: preset 'csv' needs g_csv and/or r_csv")
        for name in ("g_csv", "r_csv"):
            p = getattr(src, name)
            if p is not None and not Path(p).is_file():
                msgs.append(f"source.{name}: file not found: {p}")
    elif src.g_csv is not None or src.r_csv is not None:
        msgs.append(f"source.preset: CSV paths given but preset is {src.preset!r} (use 'csv')")
    if src.nonlinear and src.preset == "phi-u":
        msgs.append("source.nonlinear: the bilinear term is built for axisymmetric fields; "
                    "preset 'phi-u' is not supported")
    if src.nonlinear and src.harmonic != 0:
        msgs.append("source.harmonic: nonlinear runs need the axisymmetric harmonic 0")
    if src.nonlinear and cfg.physics.alpha >= 1.0:
        msgs.append("physics.alpha: nonlinear runs need alpha < 1")
    if cfg.nonlinear.d > max(cfg.slab.d_schedule) * 4:
        msgs.append("nonlinear.d: unreasonably large compared with slab.d_schedule")
    return msgs


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a raw mapping (schema, then cross-field checks) and fill defaults."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        msgs = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{path}: {e.message}")
        raise ConfigError(msgs)
    cfg = RunConfig()
    for name, cls in _BLOCKS.items():
        block = dict(raw.get(name, {}))
        setattr(cfg, name, cls(**{**asdict(getattr(cfg, name)), **block}))
    if "cache_dir" in raw:
        cfg.cache_dir = raw["cache_dir"]
    if base_dir is not None:
        for name in ("g_csv", "r_csv"):
            p = getattr(cfg.source, name)
            if p is not None and not Path(p).is_absolute():
                setattr(cfg.source, name, str((base_dir / p).resolve()))
        if cfg.cache_dir not in (None, "default") and not Path(cfg.cache_dir).is_absolute():
            cfg.cache_dir = str((base_dir / cfg.cache_dir).resolve())
    msgs = _semantic_checks(cfg)
    if msgs:
        raise ConfigError(msgs)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"<file>: config not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: invalid JSON ({exc})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    return config_from_dict(raw, path.parent.resolve())


# ---------------------------------------------------------------------------
# deterministic emission
# ---------------------------------------------------------------------------

_SIG = 12


def _clean(obj: Any) -> Any:
    """JSON-ready copy: numpy scalars/arrays converted, floats rounded to 12 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items() if k not in ("seconds", "assembly_seconds")}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
        return float(f"{x:.{_SIG}g}") + 0.0
    return obj


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Array) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.atleast_2d(rows):
            w.writerow([f"{v:.{_SIG}e}" for v in row])


def write_svg(path: Path, x: Array, series: dict[str, Array], title: str) -> None:
    """Static log-scale line plot of ``|series|`` against ``x``."""
    W, H, pad = 640, 400, 50
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    logs = {k: np.log10(np.maximum(np.abs(v), 1e-300)) for k, v in series.items()}
    finite = np.concatenate([v[np.abs(series[k]) > 0] for k, v in logs.items()] or [np.zeros(1)])
    lo = math.floor(float(np.min(finite))) if finite.size else -1.0
    hi = math.ceil(float(np.max(finite))) if finite.size else 0.0
    lo = max(lo, hi - 16)
    hi = hi if hi > lo else lo + 1
    X = lambda t: pad + (W - 2 * pad) * (t - x[0]) / max(x[-1] - x[0], 1e-300)  # noqa: E731
    Y = lambda t: H - pad - (H - 2 * pad) * (min(max(t, lo), hi) - lo) / (hi - lo)  # noqa: E731
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="none" stroke="black"/>',
             f'<text x="{W / 2:.0f}" y="{H - 10}" text-anchor="middle" font-size="12">x</text>',
             f'<text x="5" y="{pad}" font-size="12">1e{hi}</text>',
             f'<text x="5" y="{H - pad}" font-size="12">1e{lo}</text>']
    for i, (name, ly) in enumerate(logs.items()):
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(x, ly))
        c = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" points="{pts}"/>')
        parts.append(f'<text x="{W - pad - 120}" y="{pad + 18 * (i + 1)}" fill="{c}" font-size="12">{name}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# operator context
# ---------------------------------------------------------------------------

class Operators:
    """Lazily assembled operators for one run (the on-disk cache is transparent)."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self._op: CollisionOperator | None = None
        self._opS: ReducedOperator | None = None
        self._coarse: CollisionOperator | None = None
        self._gamma: GammaOperator | None = None

    @property
    def op(self) -> CollisionOperator:
        if self._op is None:
            log.info("assembling collision operator on %s", self.cfg.velocity_grid().fingerprint())
            self._op = CollisionOperator.assemble(self.cfg.velocity_grid(), cache_dir=self.cfg.cache())
        return self._op

    @property
    def opS(self) -> ReducedOperator:
        if self._opS is None:
            log.info("assembling reduced operator")
            self._opS = assemble_LS(self.cfg.axi_grid(), cache_dir=self.cfg.cache())
        return self._opS

    @property
    def coarse(self) -> CollisionOperator:
        if self._coarse is None:
            self._coarse = CollisionOperator.assemble(self.cfg.coarse_grid(), cache_dir=self.cfg.cache())
        return self._coarse

    @property
    def gamma(self) -> GammaOperator:
        if self._gamma is None:
            log.info("assembling bilinear collision term on the coarse grid")
            self._gamma = GammaOperator.assemble(self.cfg.coarse_grid(), cache_dir=self.cfg.cache())
        return self._gamma


def _check(value: float, limit: float, kind: str = "le") -> dict:
    """Record ``value`` against ``limit``; margin is positive when passing."""
    value = float(value)
    if kind == "le":
        ok, margin = value <= limit, limit - value
    elif kind == "gt":
        ok, margin = value > limit, value - limit
    else:
        ok, margin = value >= limit, value - limit
    return {"value": value, "limit": float(limit), "relation": kind, "margin": margin, "passed": bool(ok)}


def operator_checks(op: CollisionOperator, opS: ReducedOperator, seed: int) -> tuple[dict, dict]:
    h = op.hydro
    res = op.null_residuals()
    pairs = list(h.kappa1_pairs.values())
    ra, rb = h.isotropy_residual()
    anchors = gaussian_anchors(op.grid)
    checks = {
        "null_residual": _check(res.max(), 1e-6),
        "symmetry_defect": _check(op.symmetry_defect(seed=seed), 1e-10),
        "c0_est_positive": _check(op.c0_est, 0.0, "gt"),
        "kappa1_positive": _check(h.kappa1, 0.0, "gt"),
        "kappa2_positive": _check(h.kappa2, 0.0, "gt"),
        "kappa1_index_spread": _check(max(pairs) - min(pairs), 1e-4),
        "kappa2_index_spread": _check(max(h.kappa2_components) - min(h.kappa2_components), 1e-4),
        "isotropy_a_A": _check(ra, 1e-3),
        "isotropy_b_B": _check(rb, 1e-3),
        "anchor_v3sq_p3_p5": _check(abs(anchors["v3sq_p3_p5"] - 10.0), 1e-4),
        "anchor_v3sq_p5": _check(abs(anchors["v3sq_p5"]), 1e-4),
        "reduced_null_residual": _check(opS.raw_null_residual, 1e-6),
    }
    lo, hi = op.nu_bounds()
    info = {
        "grid": op.grid.fingerprint(),
        "axi_grid": opS.axi.fingerprint(),
        "null_residuals": res,
        "raw_null_residual": op.raw_null_residual(),
        "raw_symmetry_defect": op.raw_symmetry_defect(),
        "c0_est": op.c0_est,
        "kappa1": h.kappa1,
        "kappa2": h.kappa2,
        "kappa1_pairs": h.kappa1_pairs,
        "kappa2_components": h.kappa2_components,
        "nu_over_1_plus_speed": {"min": lo, "max": hi},
        "nu_range": {"min": float(op.nu.min()), "max": float(op.nu.max())},
        "gaussian_anchors": anchors,
        "reduced_raw_symmetry_defect": opS.raw_symmetry_defect,
    }
    return checks, info


def _all_pass(checks: dict) -> bool:
    return all(c["passed"] for c in checks.values())


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

@dataclass
class Problem:
    model: VelocityModel
    g: SourceFn | None
    r: Array | None
    label: str


def _plane_coords(model: VelocityModel) -> tuple[Array, Array]:
    if model.axi_grid is not None:
        return model.axi_grid.v_r, model.axi_grid.v3
    vr = np.sqrt(np.maximum(model.speed2 - model.v3**2, 0.0))
    return vr, model.v3


def read_g_csv(path: str, model: VelocityModel) -> SourceFn:
    """Rows ``x, g_0 .. g_{N-1}``; linear in x between rows, zero outside."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != model.size + 1:
        raise ConfigError([f"source.g_csv: expected {model.size + 1} columns (x and one per node), "
                           f"found {data.shape[1]}"])
    xs, vals = data[:, 0], data[:, 1:]
    if np.any(np.diff(xs) <= 0):
        raise ConfigError(["source.g_csv: x column must increase strictly"])

    def g(x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        out = np.stack([np.interp(x, xs, vals[:, j], left=0.0, right=0.0) for j in range(vals.shape[1])],
                       axis=-1)
        return out

    return g


def read_r_csv(path: str, model: VelocityModel) -> Array:
    """Rows ``node, v_r, v3, r``; coordinates must match the velocity nodes."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (model.size, 4):
        raise ConfigError([f"source.r_csv: expected {model.size} rows of (node, v_r, v3, r), "
                           f"found shape {data.shape}"])
    vr, v3 = _plane_coords(model)
    idx = data[:, 0].astype(int)
    if sorted(idx.tolist()) != list(range(model.size)):
        raise ConfigError(["source.r_csv: node column must list every node index once"])
    r = np.zeros(model.size)
    r[idx] = data[:, 3]
    if np.max(np.abs(data[:, 1] - vr[idx])) > 1e-8 or np.max(np.abs(data[:, 2] - v3[idx])) > 1e-8:
        raise ConfigError(["source.r_csv: node coordinates do not match the configured grid"])
    return r


def node_table(model: VelocityModel) -> Array:
    """``(node, v_r, v3)`` rows for the model's velocity nodes."""
    vr, v3 = _plane_coords(model)
    return np.column_stack([np.arange(model.size), vr, v3])


def build_problem(cfg: RunConfig, ops: Operators, coarse: bool = False) -> Problem:
    src = cfg.source
    alpha = cfg.physics.alpha
    if src.preset == "phi-u":
        model = model_reduced(ops.opS)
        return Problem(model, None, src.scale * phi_u_data(model, alpha), "phi-u")
    op = ops.coarse if coarse else ops.op
    model = model_from_mode(op, src.harmonic, src.parity) if src.harmonic == 1 else model_from_mode(op, 0)
    if src.preset == "zero":
        return Problem(model, None, None, "zero")
    if src.preset == "phi-theta":
        if src.harmonic != 0:
            raise ConfigError(["source.harmonic: preset 'phi-theta' lives on harmonic 0"])
        return Problem(model, None, src.scale * phi_theta_data(model, alpha), "phi-theta")
    g = read_g_csv(src.g_csv, model) if src.g_csv else None
    r = read_r_csv(src.r_csv, model) if src.r_csv else None
    if g is not None and src.scale != 1.0:
        g0 = g
        g = lambda x: src.scale * g0(x)  # noqa: E731
    if r is not None:
        r = src.scale * r
    return Problem(model, g, r, "csv")


# ---------------------------------------------------------------------------
# invariant suites
# ---------------------------------------------------------------------------

def conservation_checks(raw: SlabField, tol: float = 1e-6) -> dict:
    diag = extract_macro(raw).diagnostics
    checks = {}
    for k, v in diag.items():
        checks[k] = _check(v, tol)
    return checks


def decay_checks(kl: KLResult, floor: float = 1e-12) -> dict:
    checks: dict[str, dict] = {}
    if math.isfinite(kl.sigma_fit):
        checks["decay_slope_negative"] = _check(kl.sigma_fit, 0.0, "gt")
        checks["decay_fit_r2"] = _check(kl.decay_r2, 0.98, "ge")
    hist = kl.far.d_history
    if len(hist) >= 3:
        keys = sorted({k for _, q in hist for k in q})
        vec = [np.array([q.get(k, 0.0) for k in keys]) for _, q in hist]
        g1 = float(np.max(np.abs(vec[-2] - vec[-3])))
        g2 = float(np.max(np.abs(vec[-1] - vec[-2])))
        c = _check(g2, max(g1, floor))
        c["previous_gap"] = g1
        checks["q_geometric_improvement"] = c
    return checks


def _profile_rows(kl: KLResult, spec: WeightSpec) -> tuple[list[str], Array]:
    mac = extract_macro(kl.field)
    wn = weighted_profile(kl.field.F, kl.field.model.speed2, spec)
    return (["x", "a", "b1", "b2", "b3", "c", "weighted_sup"],
            np.column_stack([mac.x, mac.a, mac.b1, mac.b2, mac.b3, mac.c, wn]))


def _qinf_json(kl: KLResult, label: str) -> dict:
    return {"source": label, "q_inf": kl.far.to_dict()["q"], "q_tilde": kl.q_tilde,
            "a_inf": kl.a_inf, "d_history": kl.far.to_dict()["d_history"],
            "d_final": kl.field.d}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_operators(cfg: RunConfig, out: Path, seed: int = 0) -> int:
    ops = Operators(cfg)
    checks, info = operator_checks(ops.op, ops.opS, seed)
    ok = _all_pass(checks)
    write_json(out / "operators_report.json", {**info, "checks": checks, "passed": ok, "seed": seed})
    return EXIT_OK if ok else EXIT_INVARIANT


def _failure(out: Path, kind: str, message: str, **extra: Any) -> None:
    write_json(out / "failure.json", {"error": kind, "message": message, **extra})
    log.error("%s: %s", kind, message)


def _solvability_failure(out: Path, exc: SolvabilityError) -> int:
    _failure(out, "solvability",
             "sources violate the solvability condition: g must be orthogonal to the collision "
             "invariants at every x and r must carry no incoming mass flux",
             details=exc.report.offending(), r_flux=exc.report.r_flux,
             max_macro_norm=float(np.max(exc.report.macro_norms)))
    return EXIT_VALIDATION


def cmd_solve(cfg: RunConfig, out: Path, seed: int = 0) -> int:
    ops = Operators(cfg)
    scfg = cfg.solver_config()
    spec = cfg.weight()
    alpha = cfg.physics.alpha
    try:
        prob = build_problem(cfg, ops, coarse=cfg.source.nonlinear)
        if cfg.source.nonlinear:
            return _solve_nonlinear(cfg, ops, prob, out)
        kl = solve_KL(scfg, prob.model, alpha, prob.g, prob.r, lam=cfg.physics.lam, spec=spec,
                      allow_diffuse_limit=True, solvability_tol=cfg.solver.solvability_tol)
    except SolvabilityError as exc:
        return _solvability_failure(out, exc)
    except ConvergenceError as exc:
        _failure(out, "convergence", str(exc), info=_clean(exc.info))
        return EXIT_CONVERGENCE
    return _emit_solution(cfg, out, kl, prob.label, {})


def _emit_solution(cfg: RunConfig, out: Path, kl: KLResult, label: str, extra: dict) -> int:
    spec = cfg.weight()
    header, rows = _profile_rows(kl, spec)
    write_csv(out / "profiles.csv", header, rows)
    write_json(out / "qinf.json", _qinf_json(kl, label))
    checks = {**conservation_checks(kl.raw), **decay_checks(kl)}
    ok = _all_pass(checks)
    write_json(out / "diagnostics.json", {
        "checks": checks, "passed": ok, "sigma_fit": kl.sigma_fit, "decay_r2": kl.decay_r2,
        "bound_ratio": kl.bound_ratio, "route": kl.raw.info.get("route"),
        "solver_info": {k: v for k, v in kl.raw.info.items() if k != "continuation"}, **extra})
    return EXIT_OK if ok else EXIT_INVARIANT


def _solve_nonlinear(cfg: RunConfig, ops: Operators, prob: Problem, out: Path) -> int:
    scfg = cfg.solver_config()
    ncfg = cfg.nonlinear_config()
    try:
        res = solve_nonlinear(scfg, ncfg, prob.model, ops.gamma, cfg.physics.alpha, prob.g, prob.r)
    except ValueError as exc:
        if isinstance(exc, SolvabilityError):
            raise
        _failure(out, "source_too_large", str(exc))
        return EXIT_VALIDATION
    except PicardDivergence as exc:
        _failure(out, "picard_divergence", str(exc), info=_clean(exc.info))
        write_json(out / "picard.json", {"converged": False, **_clean(exc.info)})
        return EXIT_CONVERGENCE
    picard = {"converged": True, "grid": cfg.coarse_grid().fingerprint(), **res.log()}
    kl = res.kl
    if cfg.nonlinear.fine_correction:
        fine_prob = build_problem(cfg, ops, coarse=False)
        kl = fine_correction(scfg, ncfg, res, ops.gamma, fine_prob.model, cfg.velocity_grid(),
                             cfg.physics.alpha, fine_prob.g, fine_prob.r)
        picard["fine_q_tilde"] = kl.q_tilde
    write_json(out / "picard.json", picard)
    return _emit_solution(cfg, out, kl, prob.label + "+nonlinear", {"picard_ratio_max": max(res.ratios or [0.0])})


def _slip_checks(res: SlipResult) -> dict:
    checks = {
        "sigma_fit_u_positive": _check(res.sigma_fit_u, 0.0, "gt"),
        "sigma_fit_theta_positive": _check(res.sigma_fit_theta, 0.0, "gt"),
    }
    for k, v in conservation_checks(res.phi_theta.kl.raw).items():
        checks[f"phi_theta_{k}"] = v
    for k, v in conservation_checks(res.phi_u.kl.raw).items():
        checks[f"phi_u_{k}"] = v
    checks["c_u_finite"] = {"value": res.c_u, "passed": bool(math.isfinite(res.c_u))}
    checks["c_theta_finite"] = {"value": res.c_theta, "passed": bool(math.isfinite(res.c_theta))}
    return checks


def _monotone(values: list[float]) -> str:
    d = np.diff(values)
    if np.all(d > 0):
        return "increasing"
    if np.all(d < 0):
        return "decreasing"
    return "not monotone"


def cmd_slip(cfg: RunConfig, out: Path, seed: int = 0) -> int:
    ops = Operators(cfg)
    scfg = cfg.solver_config()
    grid_meta = {"n_r": cfg.grid.n_r, "n_z": cfg.grid.n_z, "n_theta": cfg.grid.n_theta,
                 "v_max": cfg.grid.v_max, "axi_n_r": cfg.grid.axi_n_r, "axi_n_z": cfg.grid.axi_n_z}
    try:
        main_res = compute_slip(cfg.physics.alpha, ops.op, ops.opS, scfg)
        sweep = []
        for a in cfg.physics.alpha_sweep:
            r = main_res if a == cfg.physics.alpha else compute_slip(a, ops.op, ops.opS, scfg)
            sweep.append(r)
    except ConvergenceError as exc:
        _failure(out, "convergence", str(exc), info=_clean(exc.info))
        return EXIT_CONVERGENCE
    checks = _slip_checks(main_res)
    doc = main_res.to_json(grid_meta)
    doc["checks"] = checks
    if sweep:
        table = [{"alpha": r.alpha, "c_u": r.c_u, "c_theta": r.c_theta, "sigma_fit_u": r.sigma_fit_u,
                  "sigma_fit_theta": r.sigma_fit_theta} for r in sorted(sweep, key=lambda r: r.alpha)]
        doc["sweep"] = table
        doc["sweep_monotonicity"] = {"c_u": _monotone([t["c_u"] for t in table]),
                                     "c_theta": _monotone([t["c_theta"] for t in table])}
    write_json(out / "slip.json", doc)
    x, cols = main_res.layers()
    write_csv(out / "layers.csv", ["x", "phi_u_b1", "phi_theta_a", "phi_theta_c"], np.column_stack([x, cols]))
    if cfg.output.svg:
        write_svg(out / "layers.svg", x, {"phi_u b1": cols[:, 0], "phi_theta a": cols[:, 1],
                                         "phi_theta c": cols[:, 2]},
                  f"Knudsen-layer decay, alpha = {cfg.physics.alpha:g}")
    return EXIT_OK if _all_pass(checks) else EXIT_INVARIANT


def contraction_check(op: CollisionOperator, cfg: SolverConfig, alpha: float, d: float = 1.0) -> dict:
    """Successive-difference ratios of the wall iteration with ``a = 0`` (no collision coupling)."""
    model = model_from_mode(op, 0)
    r = phi_theta_data(model, alpha)
    bnd = BoundarySpec(alpha, r, None).validate(model.v3)
    res = solve_fixed_point(cfg, model, bnd, None, 0.0, 0.0, cfg.slab(d), plain_only=True)
    ratio = max(res.ratios) if res.ratios else 0.0
    c = _check(ratio, (1.0 - alpha) + 0.05)
    c.update({"iterations": res.iterations, "ratios": res.ratios})
    return c


def mode_equivalence(op: CollisionOperator, cfg: SolverConfig, alpha: float, d: float) -> dict:
    """Sup-norm gap between the constructive and direct routes on the phi_theta data."""
    model = model_from_mode(op, 0)
    bnd = BoundarySpec(alpha, phi_theta_data(model, alpha), 0.0)
    con = solve_slab(replace(cfg, mode="constructive"), model, bnd, None, d)
    direct = solve_direct(model, bnd, None, cfg.slab(d))
    return _check(float(np.max(np.abs(con.F - direct.F))), 1e-6)


def constant_maxwellian_check(op: CollisionOperator, cfg: SolverConfig, alpha: float) -> dict:
    model = model_from_mode(op, 0)
    fld = solve_slab(cfg, model, BoundarySpec(alpha, None, 1.0), None, cfg.d_schedule[0])
    exact = _SQRT_2PI * model.chi["a"]
    q = compute_q(fld).vector()
    err_f = float(np.max(np.abs(fld.F - exact[None, :])))
    err_q = float(np.max(np.abs(q - np.array([_SQRT_2PI, 0.0, 0.0, 0.0]))))
    return _check(max(err_f, err_q), 1e-8)


def cmd_verify(cfg: RunConfig, out: Path, seed: int = 0) -> int:
    ops = Operators(cfg)
    scfg = cfg.solver_config()
    alpha = cfg.physics.alpha
    checks, _ = operator_checks(ops.op, ops.opS, seed)
    checks = {f"operator_{k}": v for k, v in checks.items()}
    try:
        model0 = model_from_mode(ops.op, 0)
        r = phi_theta_data(model0, alpha)
        kl = solve_KL(scfg, model0, alpha, None, r, allow_diffuse_limit=True)
        for k, v in {**conservation_checks(kl.raw), **decay_checks(kl)}.items():
            checks[f"phi_theta_{k}"] = v
        a_lam = alpha if alpha < 1.0 else 0.5
        lam = verify_lambda_independence(scfg, model0, a_lam, None, phi_theta_data(model0, a_lam), (0.0, 1.0, -2.0))
        worst = max(max(p["field_diff"], p["density_error"], p["other_diff"]) for p in lam.pairs)
        checks["lambda_independence"] = {**_check(worst, 1e-6), "alpha": a_lam, "pairs": lam.pairs}
        checks["contraction_alpha_0.5"] = contraction_check(ops.op, scfg, 0.5)
        d_eq = scfg.d_schedule[0]
        checks["mode_equivalence"] = {**mode_equivalence(ops.op, scfg, 0.5, d_eq), "d": d_eq}
        checks["constant_maxwellian"] = constant_maxwellian_check(ops.op, scfg, 0.5)
        wk = zeroth_order_wall_kernel(ops.op.grid, alpha)
        sv = np.sort(wk["singular_values"])
        # one-dimensional kernel: the second smallest singular value stays away from zero
        c = _check(sv[1], 1e-8 * max(sv[-1], 1.0), "gt")
        c.update({"passed": c["passed"] and wk["density_only"], "singular_values": sv[::-1]})
        checks["wall_kernel_density_only"] = c
        slip = compute_slip(alpha, ops.op, ops.opS, scfg)
        lifted = solve_phi_u_lifted(alpha, ops.op, scfg)
        rel = abs(lifted.coefficient - slip.c_u) / abs(slip.c_u)
        checks["reduced_vs_lifted_c_u"] = {**_check(rel, 1e-3), "c_u_reduced": slip.c_u,
                                           "c_u_lifted": lifted.coefficient}
        for k, v in conservation_checks(slip.phi_u.kl.raw).items():
            checks[f"phi_u_{k}"] = v
    except ConvergenceError as exc:
        _failure(out, "convergence", str(exc), info=_clean(exc.info))
        return EXIT_CONVERGENCE
    ok = _all_pass(checks)
    write_json(out / "verify.json", {"checks": checks, "passed": ok, "seed": seed})
    for name, c in sorted(checks.items()):
        log.info("%-40s %s", name, "pass" if c["passed"] else "FAIL")
    return EXIT_OK if ok else EXIT_INVARIANT


COMMANDS: dict[str, Callable[[RunConfig, Path, int], int]] = {
    "operators": cmd_operators, "solve": cmd_solve, "slip": cmd_slip, "verify": cmd_verify}


def run(command: str, cfg: RunConfig, out: Path, seed: int = 0, threads: int | None = None) -> int:
    """Run one command; writes ``resolved_config.json`` next to the artifacts."""
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "resolved_config.json", cfg.to_dict())
    try:
        if threads:
            with threadpool_limits(limits=threads):
                return COMMANDS[command](cfg, out, seed)
        return COMMANDS[command](cfg, out, seed)
    except ConfigError as exc:
        _failure(out, "validation", str(exc), messages=exc.messages)
        return EXIT_VALIDATION
    except OperatorError as exc:
        _failure(out, "operator", str(exc))
        return EXIT_INVARIANT
    except SolvabilityError as exc:
        return _solvability_failure(out, exc)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kls", description="Kinetic boundary-layer solver for slab geometries.")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"operators": "assemble operators and report their diagnostics",
             "solve": "solve one Knudsen-layer problem from the configured sources",
             "slip": "compute slip and jump coefficients",
             "verify": "run the invariant suite"}
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0, help="seed for randomized diagnostics (u64)")
        sp.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    if not 0 <= args.seed < 2**64:
        print("--seed: must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    if args.threads is not None and args.threads < 1:
        print("--threads: must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for m in exc.messages:
            print(f"config error: {m}", file=sys.stderr)
        return EXIT_VALIDATION
    return run(args.command, cfg, Path(args.out), args.seed, args.threads)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
