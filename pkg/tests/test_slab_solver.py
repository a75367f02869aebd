import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg as sla

from kls.boundary import BoundarySpec, SolvabilityError
from kls.collision import model_from_mode, model_full
from kls.fluid_limit import phi_theta_data
from kls.grids import SlabGrid
from kls.slab_solver import (
    ConvergenceError,
    SolverConfig,
    Trajectory,
    compute_q,
    decay_fit,
    duhamel_sweep,
    exponential_source,
    extract_macro,
    solve_direct,
    solve_fixed_point,
    solve_KL,
    solve_slab,
    verify_lambda_independence,
)

SQ2PI = math.sqrt(2 * math.pi)


@pytest.fixture(scope="module")
def m0(op):
    return model_from_mode(op, 0)


@pytest.fixture(scope="module")
def m0_small(op_small):
    return model_from_mode(op_small, 0)


@pytest.fixture(scope="module")
def kl_theta(cfg, m0):
    return solve_KL(cfg, m0, 0.5, None, phi_theta_data(m0, 0.5))


# characteristics -----------------------------------------------------------

def test_trajectory_backward_exit():
    t = Trajectory.backward(0.3, 0.5, 1.0, n_bounces=3)
    assert t.exit_time == pytest.approx(0.6)
    assert t.exit_point == 0.0
    assert t.times == pytest.approx([0.6, 2.6, 4.6])
    assert t.walls == [0.0, 1.0, 0.0]
    t = Trajectory.backward(0.3, -0.5, 1.0)
    assert t.exit_time == pytest.approx(1.4) and t.exit_point == 1.0


def test_trajectory_rejects_grazing_and_outside():
    with pytest.raises(ValueError):
        Trajectory.backward(0.5, 0.0, 1.0)
    with pytest.raises(ValueError):
        Trajectory.backward(1.5, 1.0, 1.0)


# sweep ---------------------------------------------------------------------

def test_duhamel_constant_nu_matches_exponentials(m0_small):
    model = m0_small
    slab = SlabGrid(1.5)
    nu = 3.0
    inc = np.where(model.v3 > 0, 1.0, 0.0)
    fld = duhamel_sweep(model, slab, inc, nu=nu)
    x = slab.x_nodes[:, None]
    v = model.v3[None, :]
    d = slab.d
    exact = np.where(v > 0, np.exp(-nu * x / np.abs(v)), np.exp(-nu * (2 * d - x) / np.abs(v)))
    np.testing.assert_allclose(fld.F, exact, atol=1e-13)


def test_duhamel_constant_source_is_exact(m0_small):
    model = m0_small
    slab = SlabGrid(1.0)
    s = np.full(model.size, 2.0)
    inc = np.where(model.v3 > 0, 2.0 / 4.0, 0.0)
    fld = duhamel_sweep(model, slab, inc, source=exponential_source(s, 0.0), nu=4.0)
    # f = s / nu is the exact steady state for matching incoming data
    np.testing.assert_allclose(fld.F, 0.5, atol=1e-13)
    np.testing.assert_allclose(fld.Fbar, 0.5, atol=1e-13)
    np.testing.assert_allclose(fld.Fhat, 0.0, atol=1e-13)


def test_duhamel_rejects_negative_eps(m0_small):
    with pytest.raises(ValueError):
        duhamel_sweep(m0_small, SlabGrid(1.0), np.zeros(m0_small.size), eps=-1.0)


# direct solve vs an independent ODE oracle --------------------------------

def _eigen_oracle(model, alpha, r, d, eps, xs):
    """Damped slab problem solved with the generalized eigenbasis of (L + eps, diag v3)."""
    A = np.diag(model.nu + eps) - model.K
    V = np.diag(model.v3)
    lam, W = sla.eig(A, V)
    lam, W = lam.real, W.real
    pos = lam > 0
    # modes e^{-lam x} for lam>0 and e^{-lam (x-d)} for lam<0 stay bounded
    def basis(x):
        return W * np.where(pos, np.exp(-lam * x), np.exp(-lam * (x - d)))[None, :]

    B0, Bd = basis(0.0), basis(d)
    p = model.v3 > 0
    q = ~p
    refl = model.reflection
    rows = [B0[p] - (1 - alpha) * B0[refl[p]], Bd[q] - Bd[refl[q]]]
    rhs = np.concatenate([r[p], np.zeros(q.sum())])
    c = np.linalg.solve(np.vstack(rows), rhs)
    return np.array([basis(x) @ c for x in xs])


def test_direct_solve_matches_eigen_oracle(m0_small):
    model = m0_small
    alpha, eps, d = 0.6, 0.5, 1.0
    r = phi_theta_data(model, alpha)
    slab = SlabGrid(d, 1e-3, 1.1, 0.01)
    fld = solve_direct(model, BoundarySpec(alpha, r).validate(model.v3), None, slab, eps=eps)
    ref = _eigen_oracle(model, alpha, r, d, eps, slab.x_nodes)
    assert np.max(np.abs(fld.F - ref)) <= 1e-4 * np.max(np.abs(ref))


def test_fixed_point_matches_direct_with_damping(cfg, m0_small):
    model = m0_small
    bnd = BoundarySpec(0.5, phi_theta_data(model, 0.5)).validate(model.v3)
    slab = cfg.slab(1.25)
    fp = solve_fixed_point(cfg, model, bnd, None, 1.0, 0.1, slab)
    direct = solve_direct(model, bnd, None, slab, eps=0.1)
    assert np.max(np.abs(fp.field.F - direct.F)) <= 1e-8
    assert fp.ratios and max(fp.ratios) < 1.0


# properties of converged solutions ----------------------------------------

def test_conservation_suite(kl_theta):
    diag = extract_macro(kl_theta.raw).diagnostics
    assert diag["max_b3"] <= 1e-6
    for k, v in diag.items():
        if k.startswith("max_flux_"):
            assert v <= 1e-6, k
    assert diag["mass_flux_variation"] <= 1e-6
    assert diag["quadratic_flux_defect"] <= 1e-6


def test_energy_identity(m0):
    """Flux of f at the wall equals twice the dissipation integrated over the slab."""
    alpha, d = 0.5, 5.0
    bnd = BoundarySpec(alpha, phi_theta_data(m0, alpha)).validate(m0.v3)
    cfg = SolverConfig()
    f = solve_slab(cfg, m0, bnd, None, d)
    h = np.diff(f.x)
    lhs = m0.inner(m0.v3 * f.F[0], f.F[0])
    diss = m0.inner(m0.apply_L(f.Fbar), f.Fbar) + m0.inner(m0.apply_L(f.Fhat), f.Fhat) / 3
    rhs = 2 * np.sum(h * diss)
    assert abs(m0.inner(m0.v3 * f.F[-1], f.F[-1])) <= 1e-12
    assert lhs == pytest.approx(rhs, rel=1e-4)


def test_constant_maxwellian(cfg, m0):
    f = solve_slab(cfg, m0, BoundarySpec(0.5, None, 1.0), None, 1.25)
    np.testing.assert_allclose(f.F, np.broadcast_to(SQ2PI * m0.chi["a"], f.F.shape), atol=1e-8)
    np.testing.assert_allclose(compute_q(f).vector(), [SQ2PI, 0, 0, 0], atol=1e-8)


def test_zero_data_gives_zero(cfg, m0_small):
    kl = solve_KL(cfg, m0_small, 0.5, None, None)
    assert np.max(np.abs(kl.field.F)) == 0.0
    assert kl.bound_ratio == 0.0


def test_lambda_independence(cfg, m0_small):
    rep = verify_lambda_independence(cfg, m0_small, 0.5, None, phi_theta_data(m0_small, 0.5), (0.0, 1.0, -2.0))
    assert rep.passed
    for p in rep.pairs:
        assert p["density_error"] <= 1e-6
    with pytest.raises(ValueError):
        verify_lambda_independence(cfg, m0_small, 0.5, None, None, (0.0,))


def test_constructive_and_direct_agree(cfg, m0_small):
    bnd = BoundarySpec(0.5, phi_theta_data(m0_small, 0.5), 0.0)
    con = solve_slab(replace(cfg, mode="constructive"), m0_small, bnd, None, 1.25)
    direct = solve_direct(m0_small, bnd, None, cfg.slab(1.25))
    assert np.max(np.abs(con.F - direct.F)) <= 1e-6
    assert con.info["route"] == "constructive"


def test_decay_and_far_field_convergence(kl_theta):
    assert kl_theta.sigma_fit > 0 and kl_theta.decay_r2 >= 0.98
    hist = [np.array([q.get(k, 0.0) for k in ("a", "b1", "b2", "c")]) for _, q in kl_theta.far.d_history]
    assert len(hist) >= 3
    g1 = np.max(np.abs(hist[1] - hist[0]))
    g2 = np.max(np.abs(hist[2] - hist[1]))
    assert g2 <= g1 or g2 <= 1e-12
    sigma, r2 = decay_fit(kl_theta.field)
    assert sigma == pytest.approx(kl_theta.sigma_fit)


def test_source_term_solution(cfg, m0_small):
    """Exponentially decaying microscopic source: the layer still decays and conserves."""
    model = m0_small
    prof = model.flux_tests["B3"] - model.project(model.flux_tests["B3"])
    kl = solve_KL(cfg, model, 0.5, exponential_source(prof, 5.0), None)
    diag = extract_macro(kl.raw).diagnostics
    assert diag["mass_flux_variation"] <= 1e-6
    assert kl.sigma_fit > 0


def test_solvability_violation_raises(cfg, m0_small):
    r = np.where(m0_small.v3 > 0, m0_small.density_trace, 0.0)
    with pytest.raises(SolvabilityError):
        solve_KL(cfg, m0_small, 0.5, None, r)


def test_far_field_nonconvergence_raises(m0_small):
    cfg = SolverConfig(d_schedule=(1.0, 1.1, 1.2), q_tol=1e-14)
    with pytest.raises(ConvergenceError):
        solve_KL(cfg, m0_small, 0.5, None, phi_theta_data(m0_small, 0.5))


@pytest.mark.parametrize(
    "kw",
    [
        {"mode": "fast"},
        {"eps_schedule": (1e-2, 1e-1)},
        {"a_schedule": (0.5, 1.0)},
        {"d_schedule": (0.5, 1.0)},
        {"fp_tol": 0.0},
        {"max_iters": 0},
    ],
)
def test_solver_config_validation(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw).validate()


def test_alpha_one_requires_opt_in(cfg, m0_small):
    with pytest.raises(ValueError):
        solve_slab(cfg, m0_small, BoundarySpec(1.0), None, 1.25)


def test_full_grid_agrees_with_axisymmetric_harmonic(op_small, m0_small):
    cfg = SolverConfig(d_schedule=(1.25, 2.5), min_d_points=1)
    full = model_full(op_small)
    r_full = phi_theta_data(full, 0.5)
    kl_full = solve_KL(cfg, full, 0.5, None, r_full)
    kl_0 = solve_KL(cfg, m0_small, 0.5, None, phi_theta_data(m0_small, 0.5))
    assert kl_full.q_tilde["c"] == pytest.approx(kl_0.q_tilde["c"], rel=1e-10)
    assert abs(kl_full.q_tilde["b1"]) <= 1e-10 and abs(kl_full.q_tilde["b2"]) <= 1e-10
    g = op_small.grid
    F = kl_full.field.F.reshape(-1, g.n_r, g.n_z, g.n_theta)
    assert np.max(np.ptp(F, axis=3)) <= 1e-12
