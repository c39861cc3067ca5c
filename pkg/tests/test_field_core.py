import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from curvislice.field_core import (
    DegenerateChartError,
    DomainError,
    ParameterError,
    QuadraticContraction,
    RescaledField,
    chart_field,
    chart_for_field,
    christoffel_from_chart,
    conformal2d,
    euclidean,
    eval_field,
    field_from_name,
    fq_matrix,
    fq_tensor,
    homogeneity_defect,
    load_chart_file,
    polar2d,
    polar_chart,
    quadratic_defect,
    rescale,
    rescaled_chart,
    write_chart_file,
)

FIELDS = [euclidean(2), euclidean(3), polar2d(), conformal2d(0.7)]


def polar_gamma(h):
    # Gamma^r_{tt} = -r, Gamma^t_{rt} = Gamma^t_{tr} = 1/r
    g = np.zeros((2, 2, 2))
    g[0, 1, 1] = -h[0]
    g[1, 0, 1] = g[1, 1, 0] = 1.0 / h[0]
    return g


def test_euclidean_field_is_zero():
    x = np.random.default_rng(0).normal(size=(50, 3))
    assert np.all(eval_field(euclidean(3), x, x[::-1]) == 0)


def test_polar_field_value():
    F = polar2d()
    np.testing.assert_allclose(F.eval([2.0, 0.0], [0.0, 1.0]), [2.0, 0.0], atol=1e-12)
    # same value through the chart route: F = -Gamma contracted twice
    fr = christoffel_from_chart(polar_chart, [2.0, 0.0])
    v = np.array([0.0, 1.0])
    np.testing.assert_allclose(-np.einsum("lij,i,j->l", fr.christoffel, v, v), [2.0, 0.0], atol=1e-8)


@pytest.mark.parametrize("F", FIELDS, ids=lambda f: f.name)
def test_doubling_velocity_quadruples(F):
    rng = np.random.default_rng(1)
    x = np.array([2.0, 0.3, 0.1][: F.dim])
    v = rng.normal(size=F.dim)
    np.testing.assert_allclose(F.eval(x, 2 * v), 4 * F.eval(x, v), rtol=1e-12, atol=1e-14)


def test_identity_chart_flat():
    fr = christoffel_from_chart(lambda h: np.asarray(h, dtype=float), [0.3, -0.2, 0.5])
    assert np.abs(fr.christoffel).max() < 1e-8
    np.testing.assert_allclose(fr.G, np.eye(3), atol=1e-10)


@pytest.mark.parametrize("step", [None, 5e-5])
def test_polar_christoffel_symbols(step):
    h = np.array([2.0, 0.0])
    fr = christoffel_from_chart(polar_chart, h, step)
    np.testing.assert_allclose(fr.christoffel, polar_gamma(h), atol=1e-7)
    assert fr.christoffel[0, 1, 1] == pytest.approx(-2.0, abs=1e-7)
    assert fr.christoffel[1, 0, 1] == pytest.approx(0.5, abs=1e-7)
    assert fr.symmetry_residual < 1e-8


def test_rescaled_chart_christoffel():
    x, r = np.array([2.0, 0.1]), 0.125
    chart = rescaled_chart(polar_chart, x, r)
    for h in np.random.default_rng(2).uniform(-1, 1, (6, 2)):
        scaled = christoffel_from_chart(chart, h).christoffel
        np.testing.assert_allclose(scaled, r * polar_gamma(x + r * h), atol=1e-7)


def test_degenerate_chart_rejected():
    with pytest.raises(DegenerateChartError):
        christoffel_from_chart(lambda h: np.stack([h[..., 0], h[..., 0]], -1), [1.0, 2.0])


def test_fq_matrix_zero_and_christoffel():
    q0 = QuadraticContraction(euclidean(2))
    assert np.all(fq_matrix(q0, [0.1, 0.2], [1.0, 0.0]).matrix == 0)
    h = np.array([1.7, 0.4])
    q = QuadraticContraction(polar2d())
    for k in range(2):
        m = fq_matrix(q, h, np.eye(2)[k])
        np.testing.assert_allclose(m.matrix, -polar_gamma(h)[k], atol=1e-12)
        assert m.asymmetry < 1e-9


def test_fq_tensor_matches_fq_matrix():
    h = np.array([1.3, -0.2])
    T = fq_tensor(conformal2d(0.4), h)
    q = QuadraticContraction(conformal2d(0.4))
    for k in range(2):
        np.testing.assert_allclose(T[k], fq_matrix(q, h, np.eye(2)[k]).matrix, atol=1e-12)


@given(st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=2, max_size=2))
def test_fq_matrix_linear_in_v3(alpha, v3):
    q = QuadraticContraction(polar2d())
    h = [1.5, 0.2]
    v3 = np.array(v3)
    np.testing.assert_allclose(fq_matrix(q, h, alpha * v3).matrix, alpha * fq_matrix(q, h, v3).matrix, atol=1e-10)


def test_rescale_basic_identities():
    z = np.random.default_rng(3).normal(size=(20, 2))
    assert np.all(rescale(euclidean(2), [1.0, 1.0], 0.3).eval(z, z) == 0)
    F = polar2d()
    x0, v = np.array([2.0, 0.2]), np.array([0.4, -1.1])
    np.testing.assert_allclose(rescale(F, x0, 0.25).eval(np.zeros(2), v), 0.25 * F.eval(x0, v), rtol=1e-14)
    with pytest.raises(ParameterError):
        rescale(F, x0, 0.0)


def test_nested_rescale_collapses():
    F = polar2d()
    a = rescale(rescale(F, [2.0, 0.0], 0.5), [0.2, 0.1], 0.25)
    b = rescale(F, [2.1, 0.05], 0.125)
    assert isinstance(a, RescaledField)
    z, v = np.array([0.3, -0.4]), np.array([1.0, 2.0])
    np.testing.assert_allclose(a.eval(z, v), b.eval(z, v), rtol=1e-14)


def test_rescaled_sup_halves():
    F = polar2d()
    rng = np.random.default_rng(4)
    z = rng.uniform(-1, 1, (4000, 2))
    z = z[np.linalg.norm(z, axis=1) < 1]
    v = rng.normal(size=z.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sup = [np.abs(rescale(F, [2.0, 0.0], r).eval(z, v)).max() for r in (0.2, 0.1)]
    assert sup[1] / sup[0] == pytest.approx(0.5, rel=0.2)


@pytest.mark.parametrize("F", FIELDS, ids=lambda f: f.name)
def test_homogeneity_5000_samples(F):
    rng = np.random.default_rng(5)
    x = np.array([2.0, 0.3, 0.1][: F.dim]) + rng.uniform(-0.5, 0.5, (5000, F.dim))
    v = rng.normal(size=(5000, F.dim))
    alpha = rng.uniform(-4, 4, (5000, 1))
    lhs, rhs = F.eval(x, alpha * v), alpha**2 * F.eval(x, v)
    scale = np.maximum(np.abs(rhs).max(axis=1, keepdims=True), 1e-300)
    assert np.max(np.abs(lhs - rhs) / scale) < 1e-8


@given(st.floats(1.0, 3.0), st.floats(-1.0, 1.0), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 5))
def test_homogeneity_property(r, th, v1, v2, alpha):
    assert homogeneity_defect(polar2d(), [r, th], [v1, v2], alpha) < 1e-10


def test_quadratic_defect_small():
    assert quadratic_defect(polar2d(), [1.4, 0.3], [0.2, 1.0], [-0.7, 0.5]) < 1e-12


def test_chart_field_agrees_with_closed_form():
    F_chart = chart_field(polar_chart, 2)
    rng = np.random.default_rng(6)
    x = np.stack([rng.uniform(1.0, 3.0, 10), rng.uniform(-1, 1, 10)], 1)
    v = rng.normal(size=(10, 2))
    expect = -np.einsum("blij,bi,bj->bl", np.stack([polar_gamma(h) for h in x]), v, v)
    np.testing.assert_allclose(F_chart.eval(x, v), expect, rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(polar2d().eval(x, v), expect, rtol=1e-12, atol=1e-12)


def test_conformal_field_from_metric():
    # Levi-Civita symbols of e^{2s} delta with s = k |x|^2 / 2
    k = 0.7
    F = conformal2d(k)
    x = np.array([0.3, -0.5])
    g = k * x
    gamma = np.zeros((2, 2, 2))
    for l in range(2):
        for i in range(2):
            for j in range(2):
                gamma[l, i, j] = (i == l) * g[j] + (j == l) * g[i] - (i == j) * g[l]
    v = np.array([1.2, 0.4])
    np.testing.assert_allclose(F.eval(x, v), -np.einsum("lij,i,j->l", gamma, v, v), atol=1e-14)


def test_polar_domain_enforced():
    with pytest.raises(DomainError):
        polar2d().eval([0.0, 0.0], [1.0, 0.0])


def test_catalog_resolution(tmp_path):
    assert field_from_name("euclidean:3").dim == 3
    assert field_from_name("polar2d").name == "polar2d"
    assert field_from_name("conformal2d:0.5").eval([1.0, 0.0], [0.0, 1.0])[0] == pytest.approx(0.5)
    with pytest.raises(KeyError):
        field_from_name("nope")
    path = tmp_path / "polar.csv"
    write_chart_file(path, polar_chart, "1.0:3.0:41;-1.0:1.0:41")
    chart = load_chart_file(path)
    h = np.array([[1.77, 0.31], [2.5, -0.6]])
    np.testing.assert_allclose(chart(h), polar_chart(h), atol=1e-5)
    F = field_from_name(f"chartfile:{path}")
    np.testing.assert_allclose(F.eval(h[0], [0.0, 1.0]), polar2d().eval(h[0], [0.0, 1.0]), atol=1e-3)


def test_chart_for_field():
    assert chart_for_field(polar2d()) is polar_chart
    ch = chart_for_field(rescale(polar2d(), [2.0, 0.0], 0.5))
    np.testing.assert_allclose(ch(np.array([0.2, 0.4])), polar_chart(np.array([2.1, 0.2])))
    assert chart_for_field(conformal2d(1.0)) is None
