import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvislice.field_core import euclidean
from curvislice.projections import make_family
from curvislice.scenarios import halfplane, polar_line
from curvislice.slicing import (
    GContract,
    Slice1D,
    TruncationMap,
    constant_contract,
    detect_jumps,
    fiber_coordinates_identity,
    identity_contract,
    linear_contract,
    load_voxel_file,
    slice,
    slice_variation,
    sweep,
    truncated_slice_bv_check,
    u_frak,
    write_voxel_file,
)

FLAT = make_family(euclidean(2), [0.0, 0.0], 1.0)


def synthetic(values, t=None):
    values = np.asarray(values, dtype=float)
    t = np.linspace(0, 1, len(values)) if t is None else t
    return Slice1D(np.array([1.0, 0.0]), np.zeros(2), t, values, np.ones(len(values), dtype=bool))


def test_constant_function_slice():
    c = np.array([0.3, -0.7])
    xi = np.array([0.6, 0.8])
    s = slice(lambda x: np.broadcast_to(c, np.shape(x)).copy(), identity_contract(2), FLAT, xi, [0.2, -0.15])
    np.testing.assert_allclose(s.values[s.domain_mask], c @ xi, atol=1e-15)


def test_halfplane_heaviside_slice():
    scn = halfplane()
    s = slice(scn.u, scn.gc, scn.family(), [0.0, 1.0], [0.0, 0.0])
    m = s.domain_mask
    np.testing.assert_array_equal(s.values[m], (s.t_grid[m] > 0).astype(float))
    jumps = detect_jumps(s)
    assert len(jumps) == 1
    j = jumps[0]
    assert abs(j.t_star) <= s.dt
    assert (j.trace_minus, j.trace_plus, j.jump_size) == (0.0, 1.0, 1.0)


@pytest.mark.parametrize("scn", [halfplane(), polar_line()], ids=lambda s: s.name)
def test_fiber_identity_residual(scn):
    fam = scn.family()
    for xi in ([0.0, 1.0], [0.6, -0.8]):
        xi = np.array(xi)
        s = slice(scn.u, scn.gc, fam, xi, 0.2 * fam.R0 * np.array([-xi[1], xi[0]]))
        assert fiber_coordinates_identity(scn.u, scn.gc, fam, s) < 1e-9


def test_constant_slice_no_jumps():
    assert detect_jumps(synthetic(np.full(200, 0.4))) == []


def test_noise_no_false_positives():
    t = np.linspace(0, 1, 512)
    smooth = np.sin(3 * t)
    for seed in range(100):
        noise = np.random.default_rng(seed).uniform(-0.05 / 8, 0.05 / 8, t.size)
        assert detect_jumps(synthetic(smooth + noise, t)) == []


@given(st.floats(0.2, 0.8), st.floats(0.1, 3.0), st.booleans())
def test_step_located_within_one_step(t0, height, up):
    t = np.linspace(0, 1, 400)
    h = height if up else -height
    s = synthetic(np.where(t > t0, h, 0.0), t)
    jumps = detect_jumps(s)
    assert len(jumps) == 1
    assert abs(jumps[0].t_star - t0) <= s.dt
    assert jumps[0].jump_size == pytest.approx(height)
    assert jumps[0].exceeds_one == (height > 1)


def test_slice_variation_examples():
    t = np.linspace(0, 1, 400)
    a = -1.7
    assert slice_variation(synthetic(a * t, t)) == (pytest.approx(abs(a)), 0)
    assert slice_variation(synthetic(np.where(t > 0.5, 2.0, 0.0), t)) == (pytest.approx(0.0, abs=1e-12), 1)
    ramp = 0.3 * t + np.where(t > 0.5, 0.5, 0.0)
    assert slice_variation(synthetic(ramp, t)) == (pytest.approx(0.8), 0)


def test_slice_variation_restricted_to_ball():
    t = np.linspace(0, 1, 401)
    val, cnt = slice_variation(synthetic(t, t), B_mask=t <= 0.5)
    assert val == pytest.approx(0.5) and cnt == 0


def test_u_frak():
    def u(x):
        return np.array([[1.0, 2.0, -0.5]])

    np.testing.assert_allclose(u_frak(u, identity_contract(3), np.zeros(3)), [1.0, 2.0, -0.5], atol=1e-12)
    e = np.array([1.0, 1.0, 0.0])
    expect = (np.array([1.0, 2.0, -0.5]) @ e) * e / (e @ e)
    np.testing.assert_allclose(u_frak(u, constant_contract(e), np.zeros(3)), expect, atol=1e-12)


def test_u_frak_rank_two():
    # g(x, v) = M v with M of rank 2; oracle: Gram-Schmidt on sampled images
    M = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [1.0, 1.0, 1.0]])
    gc = linear_contract(M)
    assert gc.rank(np.zeros(3)) == 2
    rng = np.random.default_rng(0)
    imgs = rng.normal(size=(64, 3)) @ M.T
    basis = []
    for v in imgs:
        for b in basis:
            v = v - (v @ b) * b
        if np.linalg.norm(v) > 1e-8:
            basis.append(v / np.linalg.norm(v))
    assert len(basis) == 2
    val = np.array([0.3, -1.2, 2.0])
    expect = sum((val @ b) * b for b in basis)
    np.testing.assert_allclose(u_frak(lambda x: val[None], gc, np.zeros(3)), expect, atol=1e-10)


def test_truncated_bv_constant_is_zero():
    u = lambda x: np.ones_like(np.atleast_2d(x))  # noqa: E731
    assert truncated_slice_bv_check(u, identity_contract(2), FLAT, np.array([0.0, 1.0]), n_fibers=32) == 0.0


def test_truncated_bv_halfplane_analytic_and_stable():
    scn = halfplane()
    xi = np.array([0.0, 1.0])
    # every fiber crosses the line once inside the unit ball: tau(1) * 2
    expect = TruncationMap()(1.0) * 2
    a = truncated_slice_bv_check(scn.u, scn.gc, scn.family(), xi, n_fibers=128, n_samples=256)
    b = truncated_slice_bv_check(scn.u, scn.gc, scn.family(), xi, n_fibers=256, n_samples=512)
    assert a == pytest.approx(expect, rel=0.02)
    assert b == pytest.approx(a, rel=0.05)


def test_truncated_bv_unbounded_function():
    def u(x):
        x = np.atleast_2d(x)
        return np.stack([np.zeros(len(x)), 1.0 / x[:, 1]], 1)

    tau = TruncationMap()
    val = truncated_slice_bv_check(u, identity_contract(2), FLAT, np.array([0.0, 1.0]), n_fibers=256)
    # per fiber: 2 across the pole plus 1 - tau(1/a) on each side, a = sqrt(1 - y^2)
    y = (np.arange(4000) + 0.5) / 4000 * 2 - 1
    a = np.sqrt(1 - y**2)
    expect = np.sum(2 + 2 * (1 - tau(1 / a))) * (2 / 4000)
    assert np.isfinite(val)
    assert val == pytest.approx(expect, rel=0.05)


def test_reslicing_equivariance():
    scn = halfplane()
    fam = scn.family()
    xi = np.array([0.6, 0.8])

    def shifted(x):
        x = np.atleast_2d(x)
        return scn.u(x) + 0.05 * x

    dirs = np.array([xi])
    (_, fa), = list(sweep(scn.u, scn.gc, fam, dirs, 64))
    (_, fb), = list(sweep(shifted, scn.gc, fam, dirs, 64))
    for k in range(64):
        ja = [j.t_star for j in detect_jumps(fa.slice(k))]
        jb = [j.t_star for j in detect_jumps(fb.slice(k))]
        assert ja == jb


def test_voxel_round_trip(tmp_path):
    ax = np.linspace(-1, 1, 21)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    vals = np.stack([2 * X + Y, X - 3 * Y], -1)
    write_voxel_file(tmp_path / "u.vox", vals, [-1.0, -1.0], [0.1, 0.1])
    f = load_voxel_file(tmp_path / "u.vox")
    p = np.array([[0.13, -0.42], [0.5, 0.5]])
    np.testing.assert_allclose(f(p), np.stack([2 * p[:, 0] + p[:, 1], p[:, 0] - 3 * p[:, 1]], 1), atol=1e-12)


def test_gcontract_call_shapes():
    gc = GContract("sum", lambda x, v: np.sum(v, axis=1, keepdims=True), 1)
    assert gc(np.zeros(2), np.ones(2)).shape == (1, 1)
