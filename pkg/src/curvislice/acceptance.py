"""The acceptance criteria as runnable checks, shared by the ``suite`` command and the test-suite."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass

import numpy as np

from . import gbd, measures, oscillation
from .field_core import christoffel_from_chart, fq_tensor, euclidean, polar2d, polar_chart
from .geodesics import _fd_jacobian, estimate_injectivity_radius, exp_inverse, exp_map, integrate
from .projections import build_family, c2_distance_to_straight, make_family, project, verify_transversality
from .scenarios import get_scenario, halfplane, polar_line

DEFAULTS = {
    "seed": 0,
    "c1": {"probes": 10000, "christoffel_probes": 1000},
    "c2": {"paths": 12, "t_end": 1.0},
    "c3": {"points": [[2.0, 0.0], [1.5, 0.7], [3.0, -1.0]], "round_trips": 500},
    "c4": {"flat_triples": 10000, "polar_samples": 200, "x0": [2.0, 0.0]},
    "c5": {"directions": 256, "fibers": 256},
    "c6": {"eps": [0.04, 0.02, 0.01]},
    "c7": {"box_half": 0.5, "depths": [3, 4, 5, 6, 7]},
    "c8": {"scenarios": ["halfplane", "circle", "polar_line", "geodesic_circle"], "directions": 128, "fibers": 128},
    "c9": {"directions": 64},
    "c10": {"samples": 100, "anchor": [-0.3333333333333333, -0.3333333333333333], "x": [2.0, 0.1], "frozen_c": 1.21},
    "c11": {"points": 5, "depth": 23, "per_unit": 10},
}

CRITERIA = {
    1: "Euclidean collapse",
    2: "Geodesic fidelity",
    3: "Exponential map",
    4: "Transversality",
    5: "eta oracle",
    6: "Favard oracle",
    7: "Caratheodory vs representation",
    8: "Slicing theorem",
    9: "Oscillation",
    10: "Rigid interpolation",
    11: "Weak Poincare",
    12: "Determinism",
}


@dataclass
class CriterionResult:
    index: int
    name: str
    passed: bool
    metrics: dict

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} criterion {self.index}: {self.name}"

    def to_dict(self) -> dict:
        return {"index": self.index, "name": self.name, "passed": self.passed, "metrics": clean(self.metrics)}


def clean(obj):
    """Plain JSON types, recursively."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def merge_config(user: dict | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    for k, v in (user or {}).items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


# ---------------------------------------------------------------------------


def criterion_1(cfg, shared) -> CriterionResult:
    rng = np.random.default_rng([cfg["seed"], 1])
    N = cfg["c1"]["probes"]
    F = euclidean(2)
    x = rng.uniform(-1, 1, (N, 2))
    xi = rng.uniform(-1, 1, (N, 2))
    err_exp = float(np.abs(exp_map(F, np.zeros(2), xi) - xi).max())
    err_exp = max(err_exp, float(np.abs(np.stack([exp_map(F, p, v) for p, v in zip(x[:100], xi[:100])]) - (x[:100] + xi[:100])).max()))
    fam = make_family(F, np.zeros(2), 2.0)
    d = _unit_rows(xi)
    y = project(fam, d, x).y
    straight = x - np.sum(x * d, axis=1, keepdims=True) * d
    err_proj = float(np.abs(y - straight).max())
    Z = gbd.q_lattice(2, per_unit=40)
    Z = Z[rng.integers(0, len(Z), N)]
    sk = gbd.build_skeletons(F, np.zeros(2), 1.0, Z)
    verts = np.vstack([np.zeros(2), np.eye(2)])
    err_skel = 0.0
    for s in sk[:: max(1, N // 2000)]:
        for (i, j), e in s.edges.items():
            dv = verts[j] - verts[i]
            err_skel = max(err_skel, abs(e.travel_time - np.linalg.norm(dv)),
                           float(np.abs(s.xi[i, j] - dv / np.linalg.norm(dv)).max()),
                           float(np.abs(s.xi[j, i] - dv / np.linalg.norm(dv)).max()))
    M = cfg["c1"]["christoffel_probes"]
    err_gamma = float(np.abs(fq_tensor(F, x)).max())
    # the chart route differentiates the identity chart numerically; reported, its noise floor is ~1e-9
    chart_fd = max(float(np.abs(christoffel_from_chart(lambda h: np.asarray(h, dtype=float), h).christoffel).max())
                   for h in x[:M])
    err_field = float(np.abs(F.eval(x, xi)).max())
    worst = max(err_exp, err_proj, err_skel, err_gamma, err_field)
    return CriterionResult(1, CRITERIA[1], worst < 1e-9, {
        "exp": err_exp, "projection": err_proj, "skeleton": err_skel, "christoffel": err_gamma,
        "christoffel_identity_chart_fd": chart_fd, "field": err_field, "probes": N})


def criterion_2(cfg, shared) -> CriterionResult:
    rng = np.random.default_rng([cfg["seed"], 2])
    F = polar2d()
    T = cfg["c2"]["t_end"]
    res = drift = rep = 0.0
    for _ in range(cfg["c2"]["paths"]):
        x = np.array([rng.uniform(1.5, 2.5), rng.uniform(-0.5, 0.5)])
        xi = rng.normal(size=2) * 0.4
        path = integrate(F, x, xi, T)
        res = max(res, float(path.ode_residual(F).max()))
        g = gbd.chart_jacobian(polar_chart, path.points)
        speed = np.linalg.norm(np.einsum("bmj,bj->bm", g, path.velocities), axis=1)
        drift = max(drift, float(np.abs(speed / speed[0] - 1).max()))
        s = rng.uniform(0.3, 0.9)
        fast = integrate(F, x, s * xi, T)
        tt = np.linspace(0, T, 11)
        rep = max(rep, float(np.abs(fast.position(tt) - path.position(s * tt)).max()))
    return CriterionResult(2, CRITERIA[2], res < 1e-5 and drift < 1e-6 and rep < 1e-8,
                           {"ode_residual": res, "speed_drift": drift, "reparametrization": rep})


def criterion_3(cfg, shared) -> CriterionResult:
    rng = np.random.default_rng([cfg["seed"], 3])
    F = polar2d()
    d_err = rt = 0.0
    radii = []
    for x in np.asarray(cfg["c3"]["points"], dtype=float):
        _, J = _fd_jacobian(lambda v, _i: exp_map(F, x, v), np.zeros((1, 2)), np.arange(1), step=1e-6)
        d_err = max(d_err, float(np.abs(J[0] - np.eye(2)).max()))
        inj = estimate_injectivity_radius(F, x).radius
        radii.append(inj)
        m = cfg["c3"]["round_trips"]
        u = _unit_rows(rng.normal(size=(m, 2))) * (0.9 * inj * np.sqrt(rng.uniform(0, 1, (m, 1))))
        z = exp_map(F, x, u)
        back = exp_inverse(F, x, z)
        rt = max(rt, float(np.abs(back - u).max()))
    return CriterionResult(3, CRITERIA[3], d_err < 1e-4 and rt < 1e-8,
                           {"differential": d_err, "round_trip": rt, "injectivity": radii})


def criterion_4(cfg, shared) -> CriterionResult:
    c = cfg["c4"]
    flat = make_family(euclidean(2), np.zeros(2), 1.0)
    rep_flat = verify_transversality(flat, n_samples=c["flat_triples"] // 2, seed=cfg["seed"])
    F = polar2d()
    x0 = np.asarray(c["x0"], dtype=float)
    fam = build_family(F, x0, n_samples=c["polar_samples"], seed=cfg["seed"])
    r_x = fam.R0
    base = make_family(F, x0, 1.0)
    d1 = c2_distance_to_straight(base.at_scale(r_x), seed=cfg["seed"])
    d2 = c2_distance_to_straight(base.at_scale(r_x / 2), seed=cfg["seed"])
    ok = (rep_flat.flat_error < 1e-5 and rep_flat.C_prime > 0 and fam.report.verdict == "pass" and d2 / d1 <= 0.6)
    return CriterionResult(4, CRITERIA[4], ok, {
        "flat_jacobian_error": rep_flat.flat_error, "flat_C_prime": rep_flat.C_prime,
        "polar_r_x": r_x, "polar_verdict": fam.report.verdict, "polar_C_prime": fam.report.C_prime,
        "c2_distance": [d1, d2], "c2_ratio": d2 / d1})


def _halfplane_cloud(cfg, shared):
    if "halfplane_cloud" not in shared:
        scn = halfplane()
        shared["halfplane_cloud"] = measures.collect_jumps(
            scn.u, scn.gc, scn.family(), cfg["c5"]["directions"], cfg["c5"]["fibers"])
    return shared["halfplane_cloud"]


def criterion_5(cfg, shared) -> CriterionResult:
    cloud = _halfplane_cloud(cfg, shared)
    e = cloud.eta(lambda x: np.linalg.norm(x, axis=1) < 1)
    err = float(np.abs(e - 2 * cloud.directions[:, 1] ** 2).max())
    z1 = measures.zeta(cloud, 1)
    rel = abs(z1 - 2 * np.pi) / (2 * np.pi)
    return CriterionResult(5, CRITERIA[5], err <= 0.05 and rel <= 0.05,
                           {"eta_max_error": err, "zeta_1": z1, "zeta_1_rel_error": rel, "directions": len(e)})


def criterion_6(cfg, shared) -> CriterionResult:
    fam = make_family(euclidean(2), np.zeros(2), 1.0)
    fv = measures.favard(measures.segment_cloud([-0.5, 0.0], [0.5, 0.0]), fam, eps=tuple(cfg["c6"]["eps"]))
    return CriterionResult(6, CRITERIA[6], abs(fv.value - 4) <= 0.08,
                           {"value": fv.value, "raw": fv.raw, "eps": fv.eps, "observed_order": fv.order})


def criterion_7(cfg, shared) -> CriterionResult:
    cloud = _halfplane_cloud(cfg, shared)
    scn = halfplane()
    box = measures.Box(np.zeros(2), cfg["c7"]["box_half"])
    est = measures.caratheodory(cloud, box, 1, tuple(cfg["c7"]["depths"]))
    tube = measures.tube_representation(cloud, scn.distance, box)
    vals = np.array(est.depth_values)
    rel = abs(est.value - tube) / tube
    mono = bool(np.all(vals[1:] >= vals[:-1] * (1 - 0.02)))
    return CriterionResult(7, CRITERIA[7], rel <= 0.05 and mono,
                           {"caratheodory": est.depth_values, "tube": tube, "rel_gap": rel, "monotone": mono})


def criterion_8(cfg, shared) -> CriterionResult:
    c = cfg["c8"]
    rows = {}
    ok = True
    for name in c["scenarios"]:
        scn = get_scenario(name)
        rep = measures.slicing_theorem_check(scn, scn.family(), c["directions"], c["fibers"])
        good = (rep.containment is not None and rep.containment >= 0.99 and rep.recovery >= 0.95
                and rep.mass_near is not None and rep.mass_near >= 0.99)
        ok &= good
        rows[name] = rep.to_dict() | {"passed": good}
    return CriterionResult(8, CRITERIA[8], ok, rows)


def criterion_9(cfg, shared) -> CriterionResult:
    nd = cfg["c9"]["directions"]
    hp = halfplane()
    pl = polar_line()

    def smooth(x):
        x = np.atleast_2d(x)
        return np.stack([np.sin(x[:, 0]), x[:, 0] * x[:, 1]], 1)

    cases = [
        ("halfplane_jump", hp.u, hp, [0.0, 0.0], "jump"),
        ("halfplane_flat_side", hp.u, hp, [0.1, 0.3], "smooth"),
        ("smooth_field", smooth, hp, [0.1, 0.3], "smooth"),
        ("polar_line_jump", pl.u, pl, [2.0, 0.1], "jump"),
        ("polar_line_off", pl.u, pl, [2.1, -0.1], "smooth"),
    ]
    rows = {}
    ok = True
    for name, u, scn, x, kind in cases:
        rep = oscillation.osc_point(u, scn.gc, scn.field, x, n_directions=nd)
        tail = rep.osc_values[-3:]
        good = max(tail) < 1e-3 if kind == "smooth" else min(tail) >= 0.01
        dom = oscillation.domination_check(u, scn.gc, scn.field, x, n_directions=nd, seed=cfg["seed"])
        holds = all(r.holds for r in dom)
        ok &= good and holds
        rows[name] = {"kind": kind, "osc": rep.osc_values, "radii": rep.radii, "value_ok": good,
                      "domination": [[r.r, r.lhs, r.rhs] for r in dom], "domination_holds": holds}
    return CriterionResult(9, CRITERIA[9], ok, rows)


def criterion_10(cfg, shared) -> CriterionResult:
    c = cfg["c10"]
    F = polar2d()
    x = np.asarray(c["x"], dtype=float)
    r = gbd.find_r_x(F, x).r_x / 8
    z = np.asarray(c["anchor"], dtype=float)
    sk = gbd.build_skeleton(F, x, r, z)
    rng = np.random.default_rng([cfg["seed"], 10])
    H = gbd.simplex_lattice(z, 24)
    vert = rel = 0.0
    ratios = []
    for k in range(c["samples"]):
        w = rng.normal(size=(3, 2))
        a = gbd.rigid_interpolant(polar_chart, x, r, z, w)
        vert = max(vert, a.vertex_error())
        E, _ = gbd.seminorm(sk, w)
        ratios.append(float(gbd.op_norm(a.e_curvilinear(H)).max() / E))
        if k < 5:
            cg = gbd.curvilinear_gradients(a, polar_chart, x, r, H[::7], field=F)
            rel = max(rel, cg.relation_residual)
    ratios = np.array(ratios)
    spread = float(ratios.max() / ratios.min())
    frozen = c["frozen_c"]
    # an independent batch refits c; it has to land within 25% of the frozen value
    rng2 = np.random.default_rng([cfg["seed"], 10, 1])
    refit = 0.0
    for _ in range(c["samples"]):
        w = rng2.normal(size=(3, 2))
        a = gbd.rigid_interpolant(polar_chart, x, r, z, w)
        refit = max(refit, float(gbd.op_norm(a.e_curvilinear(H)).max() / gbd.seminorm(sk, w)[0]))
    stable = abs(refit / frozen - 1) <= 0.25
    ok = vert < 1e-10 and bool(np.all(ratios <= frozen)) and spread < 10 and rel < 1e-6 and stable
    return CriterionResult(10, CRITERIA[10], ok, {
        "r": r, "vertex_error": vert, "ratio_min": ratios.min(), "ratio_max": ratios.max(), "spread": spread,
        "frozen_c": frozen, "refit_c": refit, "relation_residual": rel, "q_member": sk.q_member})


POINCARE_FLOOR = 1e-9


def poincare_points(count: int):
    """Off-jump points of the polar line scenario at distances a fraction of r_x from the ray."""
    F = polar2d()
    fr = np.linspace(0.3, 0.9, count)
    pts = []
    for k in range(count):
        base = np.array([2.0 + 0.1 * k, 0.1])
        r_x = gbd.find_r_x(F, base).r_x
        pts.append((base - [0.0, fr[k] * r_x], r_x))
    return pts


def criterion_11(cfg, shared) -> CriterionResult:
    c = cfg["c11"]
    scn = polar_line()
    F = polar2d()
    rows = []
    ratios = []
    tails_ok = True
    floor_ok = True
    for x, r_x in poincare_points(c["points"]):
        lam = gbd.local_curve_measure(scn.curve, x, 2 * gbd.THETA_RADIUS, c["depth"])
        rep = gbd.poincare_experiment(scn.u, lam, F, x, [r_x / 2**k for k in range(5)], per_unit=c["per_unit"])
        if rep.skipped:
            rows.append(rep.to_dict())
            tails_ok = False
            continue
        for side in ("lhs_sup", "lhs_int"):
            seq = np.array([getattr(r, side) for r in rep.rows])
            seq = np.where(seq <= POINCARE_FLOOR, 0.0, seq)
            tails_ok &= int(np.sum(seq[1:] > seq[:-1])) <= 1 and seq[-1] <= POINCARE_FLOOR
        for r in rep.rows:
            lhs = max(r.lhs_sup, r.lhs_int)
            if r.rhs > 0:
                ratios.append(lhs / r.rhs)
            else:
                floor_ok &= lhs <= POINCARE_FLOOR
        rows.append(rep.to_dict())
    C = float(max(ratios)) if ratios else 0.0
    return CriterionResult(11, CRITERIA[11], tails_ok and floor_ok and bool(ratios), {
        "fitted_C": C, "floor": POINCARE_FLOOR, "tails_ok": tails_ok, "floor_ok": floor_ok, "points": rows})


RUNNERS = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
           7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10, 11: criterion_11}


def run_criteria(cfg: dict, only=None):
    """Results and wall-clock seconds for criteria 1-11 (or a subset)."""
    shared = {}
    results, times = [], {}
    for k, fn in RUNNERS.items():
        if only is not None and k not in only:
            continue
        t0 = time.perf_counter()
        results.append(fn(cfg, shared))
        times[str(k)] = time.perf_counter() - t0
    return results, times


def report_bytes(results) -> bytes:
    return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True).encode()


def run_suite(cfg: dict | None = None):
    """All criteria; the determinism criterion reruns 1-11 and compares the serialized reports."""
    cfg = merge_config(cfg)
    first, t1 = run_criteria(cfg)
    second, t2 = run_criteria(cfg)
    a, b = report_bytes(first), report_bytes(second)
    det = CriterionResult(12, CRITERIA[12], a == b, {"bytes": len(a), "identical": a == b})
    times = {"first_pass": t1, "second_pass": t2}
    return first + [det], times
