import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvislice.field_core import euclidean, polar2d, polar_chart
from curvislice.geodesics import (
    FlowMap,
    _fd_jacobian,
    estimate_injectivity_radius,
    exp_inverse,
    exp_map,
    flow,
    integrate,
    rk4_flow,
    solve_bvp,
    sphere_directions,
)


def chord_error(points_h):
    """Distance of embedded points from the chord through the embedded endpoints."""
    p = polar_chart(points_h)
    a, b = p[0], p[-1]
    d = (b - a) / np.linalg.norm(b - a)
    rel = p - a
    return np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]).max()


def test_flat_integration_is_straight():
    x, xi = np.array([0.3, -0.2]), np.array([1.5, 0.5])
    path = integrate(euclidean(2), x, xi, 2.0)
    t = np.linspace(0, 2, 17)
    np.testing.assert_allclose(path.position(t), x + t[:, None] * xi, atol=1e-12)
    assert path.complete


@given(st.floats(0.2, 2.0), st.floats(-np.pi, np.pi))
def test_reparametrization(s, ang):
    F = polar2d()
    x = np.array([2.0, 0.1])
    xi = 0.5 * np.array([np.cos(ang), np.sin(ang)])
    a = integrate(F, x, s * xi, 0.5)
    b = integrate(F, x, xi, 0.5 * s)
    t = np.linspace(0, 0.5, 9)
    np.testing.assert_allclose(a.position(t), b.position(s * t), atol=1e-8)


def test_polar_geodesic_is_chord():
    F = polar2d()
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = np.array([rng.uniform(1.5, 2.5), rng.uniform(-0.5, 0.5)])
        path = integrate(F, x, rng.normal(size=2) * 0.5, 1.0)
        assert chord_error(path.points) < 1e-6
        assert path.ode_residual(F).max() < 1e-5


def test_metric_speed_conserved():
    F = polar2d()
    path = integrate(F, [2.0, 0.3], [0.4, -0.6], 1.0)
    r, v = path.points[:, 0], path.velocities
    speed = np.sqrt(v[:, 0] ** 2 + r**2 * v[:, 1] ** 2)
    assert np.abs(speed / speed[0] - 1).max() < 1e-6


def test_flow_group_property():
    F = polar2d()
    rng = np.random.default_rng(1)
    W = np.stack([rng.uniform(1.5, 2.5, 1000), rng.uniform(-0.5, 0.5, 1000)], 1)
    V = rng.normal(size=(1000, 2)) * 0.3
    s, t = rng.uniform(0, 0.5, 1000), rng.uniform(0, 0.5, 1000)
    fm = FlowMap(F)
    p1, v1 = fm.eval(W, s, V)
    p2, _ = fm.eval(p1, t, v1)
    p3, _ = fm.eval(W, s + t, V)
    assert np.abs(p2 - p3).max() < 1e-7


def test_exp_basic():
    F = polar2d()
    x = np.array([2.0, 0.2])
    np.testing.assert_allclose(exp_map(F, x, np.zeros(2)), x)
    xi = np.random.default_rng(2).normal(size=(30, 2))
    np.testing.assert_allclose(exp_map(euclidean(2), x, xi), x + xi)


def test_exp_differential_identity():
    F = polar2d()
    for x in ([2.0, 0.0], [1.3, 1.0]):
        x = np.array(x)
        _, J = _fd_jacobian(lambda v, _i: exp_map(F, x, v), np.zeros((1, 2)), np.arange(1))
        np.testing.assert_allclose(J[0], np.eye(2), atol=1e-4)


def test_exp_round_trip_500():
    F = polar2d()
    x = np.array([2.0, 0.0])
    inj = estimate_injectivity_radius(F, x).radius
    rng = np.random.default_rng(3)
    u = rng.normal(size=(500, 2))
    u *= (0.95 * inj * np.sqrt(rng.uniform(0, 1, (500, 1)))) / np.linalg.norm(u, axis=1, keepdims=True)
    back = exp_inverse(F, x, exp_map(F, x, u))
    assert np.abs(back - u).max() < 1e-8


def test_injectivity_radius():
    assert estimate_injectivity_radius(euclidean(2), [0.0, 0.0], r_cap=0.7).radius == 0.7
    F = polar2d()
    est = estimate_injectivity_radius(F, [2.0, 0.0])
    assert est.radius > 0 and est.certified
    # capped output halves with the cap
    a = estimate_injectivity_radius(F, [2.0, 0.0], r_cap=0.25).radius
    b = estimate_injectivity_radius(F, [2.0, 0.0], r_cap=0.125).radius
    assert (a, b) == (0.25, 0.125)


def test_bvp_flat():
    a, b = np.array([0.1, 0.2]), np.array([1.0, -0.5])
    e = solve_bvp(euclidean(2), a, b)
    assert e.travel_time == pytest.approx(np.linalg.norm(b - a), abs=1e-15)
    np.testing.assert_allclose(e.depart_velocity, (b - a) / np.linalg.norm(b - a))


def test_bvp_polar_chord_and_symmetry():
    F = polar2d()
    a, b = np.array([2.0, 0.0]), np.array([1.7, 0.4])
    e = solve_bvp(F, a, b)
    assert e.endpoint_error < 1e-8
    assert chord_error(e.path.points) < 1e-6
    r = solve_bvp(F, b, a)
    # both edges start with unit coordinate speed, so reversal holds up to a constant rescaling of time
    def unit(v):
        return v / np.linalg.norm(v)

    np.testing.assert_allclose(unit(r.arrive_velocity), -e.depart_velocity, atol=1e-6)
    np.testing.assert_allclose(r.depart_velocity, -unit(e.arrive_velocity), atol=1e-6)
    assert np.linalg.norm(e.depart_velocity) == pytest.approx(1.0)


def test_rk4_matches_adaptive():
    F = polar2d()
    X = np.array([[2.0, 0.0], [1.8, 0.3]])
    V = np.array([[0.3, 0.2], [-0.2, 0.4]])
    a, b = flow(F, X, V, 1.0), rk4_flow(F, X, V, 1.0, 256)
    assert np.abs(a.positions - b.positions).max() < 1e-9


def test_flow_leaving_domain_flagged():
    res = flow(polar2d(), [[0.05, 0.0]], [[-1.0, 0.0]], 1.0)
    assert not res.ok[0]


def test_sphere_directions():
    for n, c in ((2, 256), (3, 512)):
        d = sphere_directions(n, c)
        assert d.shape == (c, n)
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
        assert np.abs(d.mean(axis=0)).max() < 1e-2
    with pytest.raises(ValueError):
        sphere_directions(4, 10)


def test_csv_output(tmp_path):
    path = integrate(euclidean(2), [0.0, 0.0], [1.0, 0.0], 1.0)
    path.to_csv(tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0].startswith("t,")
    assert len(rows) == len(path.t_grid) + 1
