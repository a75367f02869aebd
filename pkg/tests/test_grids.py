import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kls.grids import (
    AxiGrid,
    NormalRule,
    RadialRule,
    SlabGrid,
    VelocityGrid,
    WeightSpec,
    barycentric_weights,
    gaussian_anchors,
    lagrange_matrix,
    maxwellian,
    weight_norm,
)


@pytest.fixture(scope="module")
def g():
    return VelocityGrid(8, 16)


def test_maxwellian_moments(g):
    m = maxwellian(g.speed2)
    v = g.nodes
    assert g.integrate(m) == pytest.approx(1.0, abs=1e-10)
    for i in range(3):
        for j in range(3):
            assert g.integrate(v[:, i] * v[:, j] * m) == pytest.approx(float(i == j), abs=1e-8)
    assert g.integrate(g.speed2**2 * m) == pytest.approx(15.0, abs=1e-6)


def test_gaussian_anchors(g):
    a = gaussian_anchors(g)
    assert abs(a["v3sq_p3_p5"] - 10.0) <= 1e-4
    assert abs(a["v3sq_p5"]) <= 1e-4


def test_reflection_map_flips_v3_only(g):
    R = g.reflection_map
    v = g.nodes
    assert np.array_equal(R[R], np.arange(g.size))
    np.testing.assert_allclose(v[R, 2], -v[:, 2])
    np.testing.assert_allclose(v[R, :2], v[:, :2])
    np.testing.assert_allclose(g.weights[R], g.weights)


def test_no_grazing_nodes_and_masks(g):
    assert np.all(g.v3 != 0.0)
    assert np.array_equal(g.incoming_mask, g.v3 > 0)
    assert g.incoming_mask.sum() == g.outgoing_mask.sum() == g.size // 2


def test_azimuthal_ring_is_uniform(g):
    th = np.sort(g.theta)
    np.testing.assert_allclose(np.diff(th), 2 * np.pi / g.n_theta)


@pytest.mark.parametrize("args", [(2, 16), (8, 15), (8, 3)])
def test_invalid_velocity_grids(args):
    with pytest.raises(ValueError):
        VelocityGrid(*args)


def test_vmax_too_small():
    with pytest.raises(ValueError):
        VelocityGrid(8, 16, v_max=4.0)


def test_axi_grid_measure():
    a = AxiGrid(8, 16)
    # int v_r^2 m(v) v_r dv_r dv3 over the half plane, times pi, equals int v_1^2 m d^3v = 1
    m = maxwellian(a.speed2)
    assert np.pi * np.sum(a.weights * m) == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(a.v3[a.reflection_map], -a.v3)


def test_fingerprint_and_csv(g, tmp_path):
    assert g.fingerprint() == VelocityGrid(8, 16).fingerprint()
    assert g.fingerprint() != VelocityGrid(8, 18).fingerprint()
    path = tmp_path / "grid.csv"
    g.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == g.size + 1


def test_slab_grid():
    s = SlabGrid(2.5)
    x = s.x_nodes
    assert x[0] == 0.0 and x[-1] == pytest.approx(2.5)
    assert np.all(np.diff(x) > 0)
    assert np.max(np.diff(x)) <= 1.5 * 0.1 + 1e-12
    assert s.widths.sum() == pytest.approx(2.5)
    with pytest.raises(ValueError):
        SlabGrid(0.5)


def test_weight_spec_validation():
    with pytest.raises(ValueError):
        WeightSpec(beta=2.0)
    with pytest.raises(ValueError):
        WeightSpec(vartheta=0.2)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-5, 5), sigma=st.floats(0, 3))
def test_weight_norm_homogeneous(c, sigma):
    rng = np.random.default_rng(1)
    x = np.linspace(0, 1, 7)
    sp2 = rng.uniform(0, 20, 11)
    f = rng.standard_normal((7, 11))
    spec = WeightSpec(3.0, 0.05)
    assert weight_norm(c * f, x, sp2, spec, sigma) == pytest.approx(abs(c) * weight_norm(f, x, sp2, spec, sigma))


def test_weight_norm_value():
    x = np.array([0.0, 1.0])
    sp2 = np.array([0.0, 3.0])
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    spec = WeightSpec(3.0, 0.0)
    assert weight_norm(f, x, sp2, spec, 0.5) == pytest.approx(math.exp(0.5) * 8.0)


@settings(max_examples=25, deadline=None)
@given(coef=st.lists(st.floats(-3, 3), min_size=1, max_size=6))
def test_lagrange_reproduces_polynomials(coef):
    nodes = np.cos(np.pi * (np.arange(8) + 0.5) / 8)
    bary = barycentric_weights(nodes)
    p = np.polynomial.Polynomial(coef)
    t = np.linspace(-1, 1, 13)
    M = lagrange_matrix(nodes, bary, t)
    np.testing.assert_allclose(M @ p(nodes), p(t), atol=1e-9 * (1 + np.abs(coef).max()))


def test_rules_integrate_gaussians():
    n = NormalRule(8, 7.0)
    # weights are for the measure e^{-t^2/2} dt, truncated at |t| = 7
    assert np.sum(n.weights) == pytest.approx(math.sqrt(2 * math.pi), rel=1e-9)
    assert np.sum(n.weights * n.nodes**4) == pytest.approx(3 * math.sqrt(2 * math.pi), rel=1e-8)
    r = RadialRule(8, 7.0, 0)
    # Gauss rule for e^{-s} on (0, v_max^2/2)
    assert np.sum(r.s_weights * r.s_nodes**3) == pytest.approx(6.0, rel=1e-6)
