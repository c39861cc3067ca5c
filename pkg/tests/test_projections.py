import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvislice.field_core import euclidean, polar2d, polar_chart
from curvislice.geodesics import integrate
from curvislice.projections import (
    RetractionMap,
    build_family,
    c2_distance_to_straight,
    convergence_study,
    jacobian_full,
    make_family,
    project,
    psi,
    quotient_derivatives,
    retraction,
    verify_transversality,
)

X0 = np.array([2.0, 0.0])


@pytest.fixture(scope="module")
def polar_family():
    return make_family(polar2d(), X0, 0.5)


def unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_flat_projection_coordinates():
    fam = make_family(euclidean(2), [0.5, -0.5], 1.0)
    rng = np.random.default_rng(0)
    x = fam.x0 + rng.uniform(-0.6, 0.6, (50, 2))
    xi = unit(rng.normal(size=(50, 2)))
    fc = project(fam, xi, x)
    d = x - fam.x0
    t = np.sum(d * xi, axis=1)
    np.testing.assert_allclose(fc.t, t, atol=1e-13)
    np.testing.assert_allclose(fc.y, d - t[:, None] * xi, atol=1e-13)
    np.testing.assert_allclose(fc.xi_phi, xi, atol=1e-15)


def test_flat_build_family_uses_cap():
    fam = build_family(euclidean(2), [0.0, 0.0], r_cap=0.75, n_samples=50)
    assert fam.R0 == 0.75 and fam.report.verdict == "pass"


def test_polar_round_trip_500(polar_family):
    rng = np.random.default_rng(1)
    x = X0 + 0.45 * unit(rng.normal(size=(500, 2))) * np.sqrt(rng.uniform(0, 1, (500, 1)))
    xi = unit(rng.normal(size=(500, 2)))
    fc = project(polar_family, xi, x)
    rec, _, ok = polar_family.param(xi, fc.y, fc.t)
    assert np.all(ok)
    assert np.abs(rec - x).max() < 1e-8


def test_polar_projection_against_fiber_marching(polar_family):
    # oracle: march fibers from a fine base grid and locate the one passing closest to x
    xi = unit(np.array([0.6, 0.8]))
    x = X0 + np.array([0.1, -0.15])
    fc = project(polar_family, xi, x)
    perp = np.array([-xi[1], xi[0]])
    s_grid = fc.y @ perp + np.linspace(-2e-3, 2e-3, 81)
    best = np.inf
    for s in s_grid:
        path = integrate(polar2d(), X0 + s * perp, xi, 0.4)
        path_b = integrate(polar2d(), X0 + s * perp, -xi, 0.4)
        pts = np.vstack([path.position(np.linspace(0, 0.4, 2001)), path_b.position(np.linspace(0, 0.4, 2001))])
        d = np.linalg.norm(pts - x, axis=1).min()
        if d < best:
            best, s_best = d, s
    assert abs(s_best - fc.y @ perp) <= 5e-5 + 1e-12


def test_rescaling_identity(polar_family):
    rng = np.random.default_rng(2)
    x = X0 + 0.3 * unit(rng.normal(size=(20, 2))) * rng.uniform(0, 1, (20, 1))
    xi = unit(rng.normal(size=(20, 2)))
    big = project(polar_family, xi, x)
    small = project(make_family(polar2d(), X0, 1.0).at_scale(0.5), xi, (x - X0) / 0.5)
    np.testing.assert_allclose(big.y, 0.5 * small.y, atol=1e-9)


def test_flat_retraction():
    fam = make_family(euclidean(2), [0.0, 0.0], 1.0)
    x = np.array([0.1, 0.2])
    z = x + np.array([[0.3, -0.1], [-0.05, 0.2]])
    np.testing.assert_allclose(retraction(fam, x, z), unit(z - x), atol=1e-10)


def test_retraction_fiber_membership(polar_family):
    x = X0 + np.array([0.05, 0.02])
    z = x + np.array([[0.1, 0.05], [-0.08, 0.12], [0.02, -0.1]])
    om = retraction(polar_family, x, z)
    pz = project(polar_family, om, z).y
    px = project(polar_family, om, np.broadcast_to(x, z.shape)).y
    assert np.abs(pz - px).max() < 1e-7


def test_retraction_jacobian_sandwich(polar_family):
    lo, hi = RetractionMap(polar_family, X0 + np.array([0.02, 0.01])).jacobian_bounds(0.1, count=200)
    assert lo > 0 and hi / lo < 100


def test_psi_is_unit_and_invertible(polar_family):
    from curvislice.projections import invert_psi

    x = X0 + np.array([0.1, 0.1])
    xi = unit(np.random.default_rng(3).normal(size=(12, 2)))
    om = psi(polar_family, xi, np.broadcast_to(x, xi.shape))
    np.testing.assert_allclose(np.linalg.norm(om, axis=1), 1.0)
    np.testing.assert_allclose(invert_psi(polar_family, x, om), xi, atol=1e-8)


@given(st.floats(0.05, np.pi - 0.05))
def test_flat_transversality_jacobian(theta):
    fam = make_family(euclidean(2), [0.0, 0.0], 1.0)
    xi = np.array([[np.cos(theta), np.sin(theta)]])
    x = np.array([[0.1, 0.5]])
    qd = quotient_derivatives(fam, xi, x, x - np.array([0.0, 1.0]))
    assert jacobian_full(qd)[0] == pytest.approx(-np.sin(theta), abs=1e-5)


def test_flat_transversality_report():
    rep = verify_transversality(make_family(euclidean(2), [0.0, 0.0], 1.0), n_samples=500)
    assert rep.verdict == "pass" and rep.C_prime > 0 and rep.flat_error < 1e-5


def test_curved_c2_distance_decreases():
    base = make_family(polar2d(), X0, 1.0)
    d = [c2_distance_to_straight(base.at_scale(r), n_samples=40) for r in (0.5, 0.25, 0.125)]
    assert d[0] > d[1] > d[2]


def test_convergence_study():
    flat = convergence_study(euclidean(2), [0.0, 0.0], [0.5, 0.25], n_dirs=4, n_points=8)
    assert all(max(r["P_c0"], r["Phi_c0"]) < 1e-12 for r in flat)
    rows = convergence_study(polar2d(), X0, [0.4, 0.2, 0.1], n_dirs=8, n_points=16)
    for a, b in zip(rows, rows[1:]):
        assert b["P_c0"] / a["P_c0"] <= 0.6
