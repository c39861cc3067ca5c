"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``curvislice suite``.
"""

import pytest

from curvislice import acceptance as A

ALL = list(range(1, 13))


@pytest.fixture(scope="module")
def suite(acceptance_lines):
    results, times = A.run_suite()
    for r in results:
        seconds = times["first_pass"].get(str(r.index))
        line = r.line() + (f"  ({seconds:.1f} s)" if seconds is not None else "")
        print(line)
        acceptance_lines.append(line)
    return {r.index: r for r in results}


def metrics(suite, k):
    return suite[k].metrics


def test_euclidean_collapse(suite):
    m = metrics(suite, 1)
    for key in ("exp", "projection", "skeleton", "christoffel", "field"):
        assert m[key] < 1e-9, key
    assert suite[1].passed


def test_geodesic_fidelity(suite):
    m = metrics(suite, 2)
    assert m["ode_residual"] < 1e-5
    assert m["speed_drift"] < 1e-6
    assert m["reparametrization"] < 1e-8
    assert suite[2].passed


def test_exponential_map(suite):
    m = metrics(suite, 3)
    assert m["differential"] < 1e-4
    assert m["round_trip"] < 1e-8
    assert suite[3].passed


def test_transversality(suite):
    m = metrics(suite, 4)
    assert m["flat_jacobian_error"] < 1e-5
    assert m["flat_C_prime"] > 0
    assert m["polar_verdict"] == "pass"
    assert m["c2_ratio"] <= 0.6
    assert suite[4].passed


def test_eta_oracle(suite):
    m = metrics(suite, 5)
    assert m["eta_max_error"] <= 0.05
    assert m["zeta_1_rel_error"] <= 0.05
    assert suite[5].passed


def test_favard_oracle(suite):
    assert abs(metrics(suite, 6)["value"] - 4) <= 0.08
    assert suite[6].passed


def test_caratheodory_vs_representation(suite):
    m = metrics(suite, 7)
    assert m["rel_gap"] <= 0.05
    assert m["monotone"]
    assert suite[7].passed


def test_slicing_theorem(suite):
    for name, row in metrics(suite, 8).items():
        assert row["containment"] >= 0.99, name
        assert row["recovery"] >= 0.95, name
        assert row["mass_near"] >= 0.99, name
    assert suite[8].passed


def test_oscillation(suite):
    for name, row in metrics(suite, 9).items():
        tail = row["osc"][-3:]
        if row["kind"] == "smooth":
            assert max(tail) < 1e-3, name
        else:
            assert min(tail) >= 0.01, name
        assert all(lhs <= rhs for _, lhs, rhs in row["domination"]), name
    assert suite[9].passed


def test_rigid_interpolation(suite):
    m = metrics(suite, 10)
    assert m["vertex_error"] < 1e-10
    assert m["ratio_max"] <= m["frozen_c"]
    assert m["spread"] < 10
    assert m["relation_residual"] < 1e-6
    assert abs(m["refit_c"] / m["frozen_c"] - 1) <= 0.25
    assert suite[10].passed


def test_weak_poincare(suite):
    m = metrics(suite, 11)
    assert m["tails_ok"]
    assert m["floor_ok"]
    assert m["fitted_C"] > 0
    assert suite[11].passed


def test_determinism(suite):
    assert metrics(suite, 12)["identical"]
    assert suite[12].passed


def test_every_criterion_reported(suite):
    assert sorted(suite) == ALL
