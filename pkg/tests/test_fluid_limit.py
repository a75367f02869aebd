import json
import math

import numpy as np
import pytest

from kls.fluid_limit import (
    compute_slip,
    emit_slip_conditions,
    lift_residual,
    slip_json,
    solve_phi_theta,
    solve_phi_u,
    zeroth_order_wall_kernel,
)
from kls.slab_solver import extract_macro


@pytest.fixture(scope="module")
def slip1(op, opS, cfg):
    return compute_slip(1.0, op, opS, cfg)


def test_coefficients_are_positive_and_decay(slip1):
    assert slip1.c_u > 0 and slip1.c_theta > 0
    assert slip1.sigma_fit_u > 0 and slip1.sigma_fit_theta > 0
    assert slip1.phi_u.kl.decay_r2 >= 0.98 and slip1.phi_theta.kl.decay_r2 >= 0.98


def test_emit_slip_conditions(slip1):
    out = emit_slip_conditions(slip1, {"d3u1": 2.0, "d1u3": 1.0, "d3theta": -1.5})
    assert out["u1"] == pytest.approx(3.0 * slip1.c_u)
    assert out["u2"] == 0.0 and out["u3"] == 0.0
    assert out["theta"] == pytest.approx(-1.5 * slip1.c_theta)
    with pytest.raises(ValueError):
        emit_slip_conditions(slip1, {"d3u4": 1.0})


def test_json_and_layers(slip1):
    data = json.loads(slip_json(slip1, {"n_r": 8, "n_z": 16}))
    assert {"alpha", "c_u", "c_theta", "sigma_fit_u", "sigma_fit_theta", "grid", "d_final",
            "convergence"} <= set(data)
    x, cols = slip1.layers()
    assert cols.shape == (x.size, 3)
    assert np.max(np.abs(cols[-1])) <= 1e-3 * np.max(np.abs(cols))


def test_zero_forcing_gives_zero(opS, cfg):
    res = solve_phi_u(0.5, opS, cfg, forcing_scale=0.0)
    assert res.coefficient == 0.0
    assert np.max(np.abs(res.kl.field.F)) == 0.0


def test_forcing_is_linear(opS, cfg):
    a = solve_phi_u(0.5, opS, cfg).coefficient
    b = solve_phi_u(0.5, opS, cfg, forcing_scale=2.5).coefficient
    assert b == pytest.approx(2.5 * a, rel=1e-9)


@pytest.mark.parametrize("alpha", [0.0, 1.5])
def test_alpha_range(op, cfg, alpha):
    with pytest.raises(ValueError):
        solve_phi_theta(alpha, op, cfg)


def test_zeroth_order_wall_kernel(grid):
    for alpha in (0.3, 1.0):
        k = zeroth_order_wall_kernel(grid, alpha)
        assert k["density_only"]
        assert np.sum(k["singular_values"] <= 1e-8) == 1


def test_lift_of_reduced_solution(slip1, op):
    assert lift_residual(slip1.phi_u, op) <= 1e-3
    with pytest.raises(ValueError):
        lift_residual(slip1.phi_theta, op)


def test_alpha_continuity(op, opS, cfg, slip1):
    # coefficients grow roughly like (2 - alpha) / alpha, about 4% over this step
    s = compute_slip(0.98, op, opS, cfg)
    assert abs(s.c_u - slip1.c_u) <= 0.1 * slip1.c_u
    assert abs(s.c_theta - slip1.c_theta) <= 0.1 * slip1.c_theta
    # less accommodation means a larger jump
    assert s.c_u > slip1.c_u and s.c_theta > slip1.c_theta


def test_coefficient_does_not_depend_on_lambda(op, cfg):
    base = solve_phi_theta(0.5, op, cfg)
    shifted = solve_phi_theta(0.5, op, cfg, lam=1.0)
    assert shifted.coefficient == pytest.approx(base.coefficient, abs=1e-9)
    assert shifted.kl.a_inf - base.kl.a_inf == pytest.approx(math.sqrt(2 * math.pi), abs=1e-8)


def test_wall_flux_neutral(slip1):
    for phi in (slip1.phi_u, slip1.phi_theta):
        diag = extract_macro(phi.kl.raw).diagnostics
        assert diag["mass_flux_variation"] <= 1e-6
        assert diag["max_b3"] <= 1e-6


def test_temperature_jump_two_resolutions(slip1, op_fine, cfg):
    fine = solve_phi_theta(1.0, op_fine, cfg).coefficient
    assert abs(fine - slip1.c_theta) <= 1e-2 * fine
