import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvislice import measures as M
from curvislice.field_core import euclidean
from curvislice.projections import make_family
from curvislice.scenarios import Scenario, circle, geodesic_circle, halfplane
from curvislice.slicing import identity_contract

FLAT = make_family(euclidean(2), [0.0, 0.0], 1.0)


def smooth_u(x):
    x = np.atleast_2d(x)
    return np.stack([np.sin(x[:, 0]), x[:, 0] * x[:, 1]], 1)


@pytest.fixture(scope="module")
def hp_cloud():
    scn = halfplane()
    return M.collect_jumps(scn.u, scn.gc, scn.family(), 64, 128)


def monte_carlo_eta(xi, lines=10**5, seed=0):
    """Projected-length oracle: fibers y + t xi through the unit disc that cross {x2 = 0} inside it."""
    rng = np.random.default_rng(seed)
    perp = np.array([-xi[1], xi[0]])
    s = rng.uniform(-1, 1, lines)
    y = s[:, None] * perp
    t = -y[:, 1] / xi[1]
    x = y + t[:, None] * xi
    hit = np.linalg.norm(x, axis=1) < 1
    return 2 * np.mean(hit) * min(abs(xi[1]), 1.0)


def test_eta_continuous_zero():
    assert M.eta(smooth_u, identity_contract(2), FLAT, np.array([0.6, 0.8]), n_fibers=64) == 0.0


@pytest.mark.parametrize("theta", [0.3, 0.9, 1.5707963])
def test_eta_halfplane_oracle(theta):
    scn = halfplane()
    xi = np.array([np.cos(theta), np.sin(theta)])
    val = M.eta(scn.u, scn.gc, scn.family(), xi, n_fibers=256)
    assert val == pytest.approx(2 * xi[1] ** 2, abs=0.05)
    assert monte_carlo_eta(xi) == pytest.approx(2 * xi[1] ** 2, abs=0.01)


def test_eta_additivity():
    scn = halfplane()
    xi = np.array([0.6, 0.8])
    left = lambda x: (x[:, 0] < 0) & (x[:, 0] >= -0.5)  # noqa: E731
    right = lambda x: (x[:, 0] >= 0) & (x[:, 0] < 0.5)  # noqa: E731
    both = lambda x: left(x) | right(x)  # noqa: E731
    fam = scn.family()
    a, b, c = (M.eta(scn.u, scn.gc, fam, xi, r, n_fibers=256) for r in (left, right, both))
    assert c == pytest.approx(a + b, rel=0.01)


def test_zeta_halfplane(hp_cloud):
    assert M.zeta(hp_cloud, 1) == pytest.approx(2 * np.pi, rel=0.05)


def test_zeta_continuous_zero():
    cloud = M.collect_jumps(smooth_u, identity_contract(2), FLAT, 16, 32)
    for p in (1, 2, np.inf):
        assert M.zeta(cloud, p) == 0.0


def test_normalized_zeta_monotone_in_p(hp_cloud):
    vals = [M.zeta_normalized(hp_cloud, p) for p in (1, 1.5, 2, 4, np.inf)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


@given(st.lists(st.floats(0, 5), min_size=3, max_size=30), st.floats(1, 6), st.floats(1, 6))
def test_power_mean_property(vals, p, q):
    from curvislice.measures import lp_over_sphere

    v = np.array(vals)
    lo, hi = sorted((p, q))
    a = lp_over_sphere(v, 1.0 / len(v), lo)
    b = lp_over_sphere(v, 1.0 / len(v), hi)
    assert a <= b * (1 + 1e-9) + 1e-12


def test_caratheodory_against_tube(hp_cloud):
    scn = halfplane()
    box = M.Box(np.zeros(2), 0.5)
    est = M.caratheodory(hp_cloud, box, 1)
    tube = M.tube_representation(hp_cloud, scn.distance, box)
    assert est.value == pytest.approx(tube, rel=0.05)
    d = est.depth_values
    assert all(b >= a * 0.98 for a, b in zip(d, d[1:]))
    # the box covers a unit length of the line: the analytic value is the line integral of 2 sin^2 / 2
    assert est.value == pytest.approx(np.pi, rel=0.05)


def test_caratheodory_continuous_zero():
    cloud = M.collect_jumps(smooth_u, identity_contract(2), FLAT, 16, 32)
    est = M.caratheodory(cloud, M.Box(np.zeros(2), 0.5), 1)
    assert est.depth_values == [0.0] * 5


def test_favard_segment_and_trivial_sets():
    fv = M.favard(M.segment_cloud([-0.5, 0.0], [0.5, 0.0]), FLAT)
    assert fv.value == pytest.approx(4.0, abs=0.08)
    assert fv.order is not None and fv.order >= 1 - 1e-6
    assert M.favard(np.zeros((0, 2)), FLAT).value == 0.0
    assert M.favard(np.array([[0.1, 0.2]]), FLAT).value == pytest.approx(0.0, abs=1e-9)


def test_direction_fractions():
    scn = halfplane()
    fr = M.direction_fractions(scn.u, scn.gc, scn.family(), [[0.1, 0.0], [0.0, 0.5]], 64)
    assert fr[0] >= 0.9 and fr[1] == 0.0
    assert np.all(M.direction_fractions(smooth_u, identity_contract(2), FLAT, [[0.1, 0.1]], 32) == 0)


def test_concentration_on_circle():
    scn = circle()
    cloud = M.collect_jumps(scn.u, scn.gc, scn.family(), 64, 128)
    rep = M.concentration_diagnostic(scn.u, scn.gc, scn.family(), [[0.6, 0.0]], cloud, scn.distance, 64)
    assert rep.mass_fraction_near >= 0.99


def test_slicing_check_smooth_is_vacuous():
    scn = Scenario("smooth", euclidean(2), np.zeros(2), 1.0, identity_contract(2),
                   level=lambda x: np.atleast_2d(x)[:, 1], u_plus=smooth_u, u_minus=smooth_u,
                   curve=np.stack([np.linspace(-2, 2, 1000), np.zeros(1000)], 1))
    rep = M.slicing_theorem_check(scn, scn.family(), 16, 32)
    assert rep.n_detected == 0 and rep.containment is None and rep.mass_near is None


@pytest.mark.parametrize("make", [halfplane, geodesic_circle], ids=["halfplane", "geodesic_circle"])
def test_slicing_check_thresholds(make):
    scn = make()
    rep = M.slicing_theorem_check(scn, scn.family(), 32, 128)
    assert rep.containment >= 0.99 and rep.recovery >= 0.95
    assert rep.trace_agreement >= 0.95
    assert rep.max_atom <= 0.05


def test_estimate_json_shape():
    d = json.loads(M.estimate_json("caratheodory", np.inf, [3, 4], [1.0, 1.1], {"directions": 8}))
    assert d["p"] == "inf" and d["depths"] == [3, 4]
