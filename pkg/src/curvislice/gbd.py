"""Geodesic simplex skeletons, rigid interpolation, the GBD inequality and the weak Poincaré experiment.

Conventions.  A vertex datum ``w`` is stored as an array of shape (n+1, n) whose
row i is the value w^i attached to the vertex z + e_i (e_0 = 0).  Curvilinear
coordinates of a covector field a are a_j(h) = <a(h), g_j(h)> for the frame
g_j = d_j phi of a chart phi : R^n -> R^m.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .field_core import (
    HomogeneousField,
    chart_for_field,
    christoffel_from_chart,
    fq_tensor,
    rescale,
)
from .geodesics import GeodesicEdge, GeodesicPath, newton_batch, rk4_flow, rk4_samples, sphere_directions
from .measures import sphere_measure
from .oscillation import _disc_quadrature
from .projections import ProjectionFamily, ball_samples, project
from .slicing import GContract, detect_jumps_batch, fiber_grid, sample_fibers

SHOOT_STEPS = 256
EDGE_TOL = 1e-7
CHART_STEP = 1e-5
INTERP_COND_MAX = 1e6
LIP_INFLATE = 1.1
LIP_PAIRS = 10_000
SLACK_REL_TOL = 0.01
THETA_RADIUS = 0.01

# rho(n) from rho_search(n, samples=10**6, seed=0): the largest multiple of 0.005
# for which Q(n) keeps at least half of its rho -> 0 measure.
RHO_TABLE = {2: 0.125, 3: 0.085}


class SkeletonFailure(RuntimeError):
    def __init__(self, message, edge):
        super().__init__(f"{message} on edge {edge}")
        self.edge = edge


class InterpolationFailure(RuntimeError):
    pass


def frame_bound(n: int) -> float:
    return 1.0 / (64 * (n * n + n))


# ---------------------------------------------------------------------------
# Q(n) and rho(n)


def simplex_vertices(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    n = z.shape[-1]
    return z[..., None, :] + np.vstack([np.zeros(n), np.eye(n)])


def inner_distance(z) -> np.ndarray:
    """Signed distance from the origin to the boundary of conv{z, z + e_1, ..., z + e_n} (> 0 inside)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = z.shape[1]
    return np.minimum(np.min(-z, axis=1), (np.sum(z, axis=1) + 1) / math.sqrt(n))


def in_q(z, rho: float) -> np.ndarray:
    """z in Q(n): B_rho(0) inside the open simplex and the simplex inside B_1(0)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    verts = simplex_vertices(z)
    inside = np.all(np.linalg.norm(verts, axis=2) < 1, axis=1)
    return inside & (inner_distance(z) > rho)


def q_measure(n: int, rho: float, samples: int = 10**6, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, (samples, n))
    return float(np.mean(in_q(z, rho)) * 2.0**n)


@dataclass(frozen=True)
class RhoSearch:
    n: int
    rho: float
    measure: float
    measure_limit: float  # rho -> 0
    target: float  # omega_n / 2^{n+1}

    @property
    def target_met(self) -> bool:
        return self.measure >= self.target


def rho_search(n: int, samples: int = 10**6, seed: int = 0, step: float = 0.005) -> RhoSearch:
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, (samples, n))
    verts_ok = np.all(np.linalg.norm(simplex_vertices(z), axis=2) < 1, axis=1)
    d = np.where(verts_ok, inner_distance(z), -np.inf)
    vol = 2.0**n / samples
    limit = float(np.sum(d > 0) * vol)
    omega = math.pi ** (n / 2) / math.gamma(n / 2 + 1)
    rho = 0.0
    k = 1
    while np.sum(d > k * step) * vol >= 0.5 * limit:
        rho = k * step
        k += 1
    return RhoSearch(n, round(rho, 10), float(np.sum(d > rho) * vol), limit, omega / 2 ** (n + 1))


def rho_of(n: int) -> float:
    if RHO_TABLE.get(n) is None:
        RHO_TABLE[n] = rho_search(n).rho
    return RHO_TABLE[n]


def q_lattice(n: int, rho: float | None = None, per_unit: int = 20) -> np.ndarray:
    """Points of (1/per_unit) Z^n inside Q(n); vertex shifts stay on the same lattice."""
    rho = rho_of(n) if rho is None else rho
    s = np.arange(-per_unit, per_unit + 1) / per_unit
    g = np.stack(np.meshgrid(*([s] * n), indexing="ij"), -1).reshape(-1, n)
    return g[in_q(g, rho)]


# ---------------------------------------------------------------------------
# skeleton


@dataclass
class SimplexSkeleton:
    field: HomogeneousField  # F_{r,x}
    x: np.ndarray
    r: float
    z: np.ndarray
    vertices: np.ndarray  # (n+1, n)
    edges: dict  # (i, j) -> GeodesicEdge, i < j
    xi: np.ndarray  # (n+1, n+1, n); xi[i, j] = xi_{r,ij}
    times: np.ndarray  # (n+1, n+1), symmetric
    q_member: bool

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def max_endpoint_error(self) -> float:
        return max(e.endpoint_error for e in self.edges.values())


def _pairs(n: int):
    return list(itertools.combinations(range(n + 1), 2))


def build_skeletons(field: HomogeneousField, x, r: float, Z, rho: float | None = None,
                    steps: int = SHOOT_STEPS) -> list[SimplexSkeleton]:
    """Skeletons for many anchors at once; all edges are shot in one Newton batch."""
    x = np.asarray(x, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[1]
    rho = rho_of(n) if rho is None else rho
    Fr = rescale(field, x, r)
    pairs = _pairs(n)
    verts = simplex_vertices(Z)  # (K, n+1, n)
    A = np.concatenate([verts[:, i] for i, _ in pairs])
    Bv = np.concatenate([verts[:, j] for _, j in pairs])
    if Fr.is_flat:
        V = Bv - A
    else:
        def fun(v, idx):
            res = rk4_flow(Fr, A[idx], v, 1.0, steps)
            return np.where(res.ok[:, None], res.positions, 1e100)

        out = newton_batch(fun, Bv, Bv - A, tol=0.1 * EDGE_TOL)
        V = out.solution
    T = np.linalg.norm(V, axis=1)
    unit = V / T[:, None]
    res = rk4_flow(Fr, A, unit, T, steps)
    err = np.linalg.norm(res.positions - Bv, axis=1)
    err = np.where(res.ok, err, np.inf)
    K = len(Z)
    skeletons = []
    q_ok = in_q(Z, rho)
    for k in range(K):
        edges = {}
        xi = np.zeros((n + 1, n + 1, n))
        times = np.zeros((n + 1, n + 1))
        for p, (i, j) in enumerate(pairs):
            row = p * K + k
            if not err[row] < EDGE_TOL:
                raise SkeletonFailure(f"geodesic shooting failed (endpoint error {err[row]:.3g})", (i, j))
            path = GeodesicPath(np.array([0.0, T[row]]), np.stack([A[row], res.positions[row]]),
                                np.stack([unit[row], res.velocities[row]]), Fr.name)
            edges[(i, j)] = GeodesicEdge(A[row], Bv[row], path, float(T[row]), unit[row].copy(),
                                         res.velocities[row].copy(), float(err[row]))
            xi[i, j] = unit[row]
            xi[j, i] = res.velocities[row]
            times[i, j] = times[j, i] = T[row]
        skeletons.append(SimplexSkeleton(Fr, x, float(r), Z[k].copy(), verts[k], edges, xi, times, bool(q_ok[k])))
    return skeletons


def build_skeleton(field: HomogeneousField, x, r: float, z, rho: float | None = None) -> SimplexSkeleton:
    """Geodesic edges of F_{r,x} between the vertices z + e_i, z + e_j."""
    return build_skeletons(field, x, r, np.atleast_2d(z), rho)[0]


@dataclass(frozen=True)
class SkeletonSeminorm:
    skeleton: SimplexSkeleton

    def terms(self, w) -> np.ndarray:
        """|w^j . xi_ji - w^i . xi_ij| for i < j; w may carry leading batch axes."""
        w = np.asarray(w, dtype=float)
        xi = self.skeleton.xi
        out = [np.abs(np.sum(w[..., j, :] * xi[j, i], -1) - np.sum(w[..., i, :] * xi[i, j], -1))
               for i, j in _pairs(self.skeleton.n)]
        return np.stack(out, -1)

    def eval(self, w):
        return np.sum(self.terms(w), -1)

    def eval_truncated(self, w):
        return np.sum(np.minimum(self.terms(w), 1.0), -1)


def seminorm(skeleton: SimplexSkeleton, w) -> tuple[float, float]:
    s = SkeletonSeminorm(skeleton)
    return float(s.eval(w)), float(s.eval_truncated(w))


# ---------------------------------------------------------------------------
# charts and rigid interpolation


def chart_jacobian(chart, P, step: float = CHART_STEP) -> np.ndarray:
    """d phi / d h at every row of P, shape (B, m, n); central differences with one Richardson step."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    B, n = P.shape
    s = step * np.maximum(1.0, np.max(np.abs(P), axis=1))[:, None]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        d1 = (chart(P + s * e) - chart(P - s * e)) / (2 * s)
        d2 = (chart(P + 0.5 * s * e) - chart(P - 0.5 * s * e)) / s
        cols.append((4 * d2 - d1) / 3)
    return np.stack(cols, axis=-1)


def scaled_frame(chart, x, r: float, H) -> np.ndarray:
    """Frame g_{r,x}(h) = r d phi(x + r h)."""
    return r * chart_jacobian(chart, np.asarray(x) + r * np.atleast_2d(H))


def frame_condition(chart, x, r: float, per_axis: int = 5, step: float = 1e-4) -> float:
    """2 sup|G_{r,x}| sup|grad G_{r,x}^{-1}| over a lattice of B_1(0) (Frobenius norms).

    With G_{r,x}^{-1} = r D phi(x + r h) the product equals 2 r sup|D phi^+| sup|D^2 phi| on B_r(x).
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    s = np.linspace(-1, 1, per_axis)
    H = np.stack(np.meshgrid(*([s] * n), indexing="ij"), -1).reshape(-1, n)
    H = H[np.linalg.norm(H, axis=1) <= 1]
    P = x + r * H
    g = chart_jacobian(chart, P)
    G = np.linalg.pinv(g)
    sc = step * np.maximum(1.0, np.max(np.abs(P), axis=1))[:, None, None]
    second = np.stack([(chart_jacobian(chart, P + sc[:, :, 0] * e) - chart_jacobian(chart, P - sc[:, :, 0] * e)) / (2 * sc)
                       for e in np.eye(n)], axis=-1)
    return float(2 * r * np.max(np.linalg.norm(G, axis=(1, 2))) * np.max(np.sqrt(np.sum(second**2, axis=(1, 2, 3)))))


@dataclass(frozen=True)
class RxEstimate:
    r_x: float
    level: int
    frame_value: float
    skeleton_ok: bool


def find_r_x(field: HomogeneousField, x, chart=None, r_cap: float = 1.0, max_level: int = 30) -> RxEstimate:
    """Largest dyadic r <= r_cap where the frame condition holds and the reference skeleton exists."""
    x = np.asarray(x, dtype=float)
    n = x.size
    chart = chart or chart_for_field(field)
    if chart is None:
        raise InterpolationFailure(f"no chart known for field {field.name!r}")
    z_ref = -np.full(n, 1.0 / (n + 1))
    for k in range(max_level + 1):
        r = r_cap * 2.0**-k
        fv = frame_condition(chart, x, r)
        if fv > frame_bound(n):
            continue
        try:
            build_skeleton(field, x, r, z_ref)
        except SkeletonFailure:
            continue
        return RxEstimate(r, k, fv, True)
    raise InterpolationFailure(f"no admissible radius down to {r_cap * 2.0**-max_level:g}")


@dataclass
class InterpolantField:
    """Ambient affine covector field v_r(zeta) = A (zeta - c) + b and its curvilinear pullback a_r."""

    chart: Callable
    x: np.ndarray
    r: float
    z: np.ndarray
    w: np.ndarray
    lifted: np.ndarray  # (n+1, m) ambient covectors at the vertices
    A: np.ndarray  # (m, m)
    b: np.ndarray  # (m,)
    c: np.ndarray  # (m,)

    @property
    def n(self) -> int:
        return len(self.z)

    def ambient(self, zeta) -> np.ndarray:
        return (np.atleast_2d(zeta) - self.c) @ self.A.T + self.b

    def __call__(self, H) -> np.ndarray:
        """Curvilinear coordinates (a_r)_j(h) = v_r(phi_{r,x}(h)) . g_{j,r,x}(h)."""
        H = np.atleast_2d(np.asarray(H, dtype=float))
        v = self.ambient(self.chart(self.x + self.r * H))
        return np.einsum("bm,bmj->bj", v, scaled_frame(self.chart, self.x, self.r, H))

    def e_tilde(self) -> np.ndarray:
        """Euclidean symmetric gradient of v_r, constant in the ambient variable."""
        return 0.5 * (self.A + self.A.T)

    def e_curvilinear(self, H) -> np.ndarray:
        """e(a_r)(h) = G^{-T} e~(v_r) G^{-1}, with G^{-1} the frame matrix."""
        g = scaled_frame(self.chart, self.x, self.r, H)
        return np.einsum("bmi,mk,bkj->bij", g, self.e_tilde(), g)

    def vertex_error(self) -> float:
        return float(np.max(np.abs(self(simplex_vertices(self.z)) - self.w)))


def rigid_interpolant(chart, x, r: float, z, w, cond_max: float = INTERP_COND_MAX) -> InterpolantField:
    """Lift w through the rescaled dual frame, fit the minimum-norm affine v_r, pull back."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    w = np.asarray(w, dtype=float)
    n = z.size
    verts = simplex_vertices(z)
    g = scaled_frame(chart, x, r, verts)  # (n+1, m, n)
    if np.max(np.linalg.cond(g)) >= cond_max:
        raise InterpolationFailure("frame ill-conditioned at a vertex")
    dual = np.linalg.pinv(g)  # (n+1, n, m), row k is g^k
    lifted = np.einsum("ik,ikm->im", w, dual)
    zeta = chart(x + r * verts)
    c = zeta[0]
    D = zeta - c  # (n+1, m)
    M = np.hstack([D, np.ones((n + 1, 1))])
    scale = np.max(np.linalg.norm(D, axis=1))
    if np.linalg.cond(np.hstack([D / scale, np.ones((n + 1, 1))])) >= cond_max:
        raise InterpolationFailure("vertex images nearly affinely dependent")
    coef = np.linalg.lstsq(M, lifted, rcond=None)[0]  # minimum-norm solution, (m+1, m)
    A = coef[:-1].T
    b = coef[-1]
    return InterpolantField(chart, x, float(r), z, w, lifted, A, b, c)


@dataclass
class CurvilinearGradients:
    h: np.ndarray
    nabla: np.ndarray  # [b, i, j] = d_i a_j - a_l Gamma^l_ij
    e: np.ndarray
    relation_residual: float | None = None
    sign_residuals: dict | None = None


def _central(a, H, step: float) -> np.ndarray:
    """[b, i, j] = d_i a_j(h_b) with one Richardson step."""
    n = H.shape[1]
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        d1 = (a(H + e) - a(H - e)) / (2 * step)
        d2 = (a(H + 0.5 * e) - a(H - 0.5 * e)) / step
        cols.append((4 * d2 - d1) / 3)
    return np.stack(cols, axis=1)


def curvilinear_gradients(a, chart, x, r: float, H, field: HomogeneousField | None = None,
                          step: float = 1e-2) -> CurvilinearGradients:
    """Curvilinear gradient and symmetric gradient of a (curvilinear coordinates) for the chart phi_{r,x}.

    Gamma_{r,x}(h) = r Gamma(x + r h) comes from differentiating the chart.  When a is an
    InterpolantField the frame relation is evaluated; when a field is given, sym D a +/- a.F^q
    are both compared with e(a).
    """
    x = np.asarray(x, dtype=float)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    gam = r * np.stack([christoffel_from_chart(chart, p).christoffel for p in x + r * H])
    D = _central(a, H, step)
    av = a(H)
    nabla = D - np.einsum("bl,blij->bij", av, gam)
    e = 0.5 * (nabla + np.swapaxes(nabla, 1, 2))
    out = CurvilinearGradients(H, nabla, e)
    if isinstance(a, InterpolantField):
        out.relation_residual = float(np.max(np.abs(a.e_curvilinear(H) - e)))
    if field is not None:
        T = fq_tensor(rescale(field, x, r), H)
        aT = np.einsum("bl,blij->bij", av, T)
        sym = 0.5 * (D + np.swapaxes(D, 1, 2))
        out.sign_residuals = {"plus": float(np.max(np.abs(sym + aT - e))),
                              "minus": float(np.max(np.abs(sym - aT - e)))}
    return out


def simplex_lattice(z, per_edge: int = 12) -> np.ndarray:
    """Barycentric lattice of conv{z + e_i}."""
    z = np.asarray(z, dtype=float)
    n = z.size
    pts = []
    for c in itertools.product(range(per_edge + 1), repeat=n):
        if sum(c) <= per_edge:
            pts.append(np.array(c, dtype=float) / per_edge)
    return z + np.array(pts)


def op_norm(S) -> np.ndarray:
    return np.max(np.abs(np.linalg.eigvalsh(S)), axis=-1)


# ---------------------------------------------------------------------------
# measures


@dataclass
class DiscreteMeasure:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("negative mass")

    @property
    def total(self) -> float:
        return float(np.sum(self.weights))

    def ball(self, center, radius: float) -> float:
        inside = np.linalg.norm(self.points - np.asarray(center, dtype=float), axis=1) < radius
        return float(np.sum(self.weights[inside]))

    def pushforward(self, x, r: float) -> "DiscreteMeasure":
        """lambda_r = (psi_{r,x})_# lambda with psi_{r,x}(p) = (p - x) / r."""
        return DiscreteMeasure((self.points - np.asarray(x, dtype=float)) / r, self.weights)

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.points, factor * self.weights)

    @staticmethod
    def zero(n: int) -> "DiscreteMeasure":
        return DiscreteMeasure(np.zeros((0, n)), np.zeros(0))

    @staticmethod
    def from_curve(curve, depth: int) -> "DiscreteMeasure":
        """Length of a polyline collected in dyadic cubes of side 2^-depth, placed at the mass centroid."""
        curve = np.asarray(curve, dtype=float)
        mid = 0.5 * (curve[1:] + curve[:-1])
        ln = np.linalg.norm(np.diff(curve, axis=0), axis=1)
        keys = np.floor(mid * 2.0**depth).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        mass = np.bincount(inv, weights=ln, minlength=len(uniq))
        cen = np.stack([np.bincount(inv, weights=ln * mid[:, d], minlength=len(uniq)) for d in range(curve.shape[1])], 1)
        keep = mass > 0
        return DiscreteMeasure(cen[keep] / mass[keep, None], mass[keep])


def segment_measure(p, d, half: float, depth: int) -> DiscreteMeasure:
    """Length measure on the segment p + s d, |s| <= half, at dyadic resolution 2^-depth."""
    d = np.asarray(d, dtype=float) / np.linalg.norm(d)
    count = int(math.ceil(2 * half * 2.0**depth * 4)) + 1
    s = np.linspace(-half, half, count)
    return DiscreteMeasure.from_curve(np.asarray(p, dtype=float) + s[:, None] * d, depth)


def local_curve_measure(curve, x, half: float, depth: int) -> DiscreteMeasure:
    """Length measure of a sampled curve within distance ``half`` of x, resampled finer than 2^-depth.

    Consecutive samples are joined by straight pieces, so the result is exact for piecewise straight curves.
    """
    curve = np.asarray(curve, dtype=float)
    n = curve.shape[1]
    idx = np.nonzero(np.linalg.norm(curve - np.asarray(x, dtype=float), axis=1) <= half)[0]
    parts = []
    # separate visits of the ball are resampled separately
    for run in np.split(idx, np.nonzero(np.diff(idx) > 1)[0] + 1):
        if len(run) < 2:
            continue
        pieces = []
        for a, b in zip(curve[run[:-1]], curve[run[1:]]):
            k = max(2, int(math.ceil(np.linalg.norm(b - a) * 2.0**depth * 4)) + 1)
            pieces.append(a + np.linspace(0.0, 1.0, k)[:-1, None] * (b - a))
        parts.append(DiscreteMeasure.from_curve(np.concatenate(pieces + [curve[run[-1:]]]), depth))
    if not parts:
        return DiscreteMeasure.zero(n)
    return DiscreteMeasure(np.concatenate([p.points for p in parts]), np.concatenate([p.weights for p in parts]))


# ---------------------------------------------------------------------------
# the GBD inequality


def lipschitz_estimate(family: ProjectionFamily, xi, n_pairs: int = LIP_PAIRS, seed: int = 0,
                       inflate: float = LIP_INFLATE) -> float:
    """max |P x - P x'| / |x - x'| over sampled pairs, inflated.

    Half of the pairs are close (|x - x'| ~ 1e-3 R0) and half are far apart.
    """
    rng = np.random.default_rng(seed)
    n = family.dim
    pool = int(math.ceil(math.sqrt(n_pairs)))
    base = family.x0 + 0.95 * ball_samples(rng, pool, n, family.R0)
    near = base + 1e-3 * family.R0 * ball_samples(rng, pool, n, 1.0)
    pts = np.concatenate([base, near])
    y = project(family, xi, pts, check_domain=False).y
    i_far = rng.integers(0, pool, size=(n_pairs // 2, 2))
    i_far = i_far[i_far[:, 0] != i_far[:, 1]]
    far = np.linalg.norm(y[i_far[:, 0]] - y[i_far[:, 1]], axis=1) / np.linalg.norm(pts[i_far[:, 0]] - pts[i_far[:, 1]], axis=1)
    idx = np.arange(pool)
    close = np.linalg.norm(y[idx] - y[pool + idx], axis=1) / np.linalg.norm(pts[idx] - pts[pool + idx], axis=1)
    return float(inflate * max(far.max(initial=0.0), close.max(initial=0.0)))


def fiber_variation(values, mask, t_grid, B_mask) -> np.ndarray:
    """Per fiber: variation inside B with jumps of size > 1 replaced by 1."""
    m = mask & B_mask
    pair = m[:, 1:] & m[:, :-1]
    d = np.abs(np.diff(np.where(m, values, 0.0), axis=1))
    d = np.where(pair, d, 0.0)
    jt = detect_jumps_batch(np.where(mask, values, np.nan), t_grid)
    if jt.fiber.size:
        big = jt.size > 1
        f, j = jt.fiber[big], jt.index[big] - 1
        d[f, j] = np.where(pair[f, j], 1.0, d[f, j])
    return np.sum(d, axis=1)


@dataclass
class SlackRow:
    family: int
    xi: list
    center: list
    radius: float
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.slack >= -SLACK_REL_TOL * max(self.rhs, self.lhs, 0.0)

    def to_dict(self) -> dict:
        return {"family": self.family, "xi": self.xi, "center": self.center, "radius": self.radius,
                "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "passed": self.passed}


@dataclass
class GBDWitness:
    measure: DiscreteMeasure
    rows: list = dc_field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def worst_slack(self) -> float:
        return min((r.slack for r in self.rows), default=0.0)

    def blow_up(self, x, r: float) -> DiscreteMeasure:
        return self.measure.pushforward(x, r)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "worst_slack": self.worst_slack, "rows": [r.to_dict() for r in self.rows]}


def gbd_inequality_check(u, gc: GContract, measure: DiscreteMeasure, families, balls, directions,
                         n_fibers: int = 256, n_samples: int = 512, seed: int = 0) -> GBDWitness:
    """slack = |phi'|_inf^2 Lip(P_xi)^{n-1} lambda(B) - int |D u^xi_y|(B^xi_y minus J^1) + H^0(B^xi_y cap J^1) dy."""
    wit = GBDWitness(measure)
    for fi, fam in enumerate(families):
        n = fam.dim
        for xi in np.atleast_2d(directions):
            xi = np.asarray(xi, dtype=float) / np.linalg.norm(xi)
            Y, wts = fiber_grid(fam, xi, n_fibers)
            fb = sample_fibers(u, gc, fam, xi, Y, n_samples, wts)
            speed = float(np.max(np.linalg.norm(fb.velocities[fb.mask], axis=1), initial=0.0))
            lip = lipschitz_estimate(fam, xi, seed=seed)
            for center, radius in balls:
                center = np.asarray(center, dtype=float)
                inB = np.linalg.norm(np.nan_to_num(fb.points) - center, axis=2) < radius
                lhs = float(np.sum(fiber_variation(fb.values, fb.mask, fb.t_grid, inB) * fb.weight))
                rhs = speed**2 * lip ** (n - 1) * measure.ball(center, radius)
                wit.rows.append(SlackRow(fi, xi.tolist(), center.tolist(), float(radius), lhs, float(rhs)))
    return wit


# ---------------------------------------------------------------------------
# weak Poincaré experiment


def density_estimate(measure: DiscreteMeasure, x, r_max: float = THETA_RADIUS, levels: int = 16, tail: int = 4) -> float:
    """lim sup of lambda(B_r(x)) / r^{n-1}, read off the smallest of the dyadic radii r_max 2^-k."""
    n = measure.points.shape[1]
    radii = r_max * 2.0 ** -np.arange(levels)
    dens = [measure.ball(x, r) / r ** (n - 1) for r in radii]
    return float(max(dens[-tail:]))


def radial_variation(u_rx, field_r: HomogeneousField, Z, n_dirs: int = 64, n_samples: int = 257,
                     t_max: float = 2.0) -> np.ndarray:
    """O_{r,z}: integral over directions of the truncated variation of t -> u_{r,x}(exp_{r,z}(t xi)) . d/dt exp_{r,z}(t xi) in B_1(0)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n = Z.shape[1]
    dirs = sphere_directions(n, n_dirs)
    X = np.repeat(Z, n_dirs, axis=0)
    V = np.tile(dirs, (len(Z), 1))
    t = np.linspace(0.0, t_max, n_samples)
    P, W, ok = rk4_samples(field_r, X, V, t)
    mask = ok & (np.linalg.norm(np.nan_to_num(P, nan=9.0), axis=2) < 1)
    vals = np.zeros(mask.shape)
    vals[mask] = np.sum(u_rx(P[mask]) * W[mask], axis=1)
    # samples past the first exit do not belong to the slice
    mask = np.cumprod(mask, axis=1).astype(bool)
    pair = mask[:, 1:] & mask[:, :-1]
    var = np.sum(np.where(pair, np.minimum(np.abs(np.diff(vals, axis=1)), 1.0), 0.0), axis=1)
    return var.reshape(len(Z), n_dirs).sum(axis=1) * sphere_measure(n) / n_dirs


@dataclass
class PoincareRow:
    r: float
    E: float
    E1: float
    O_sum: float
    lhs_sup: float
    lhs_int: float
    rhs: float
    z_r: list

    def to_dict(self) -> dict:
        return {"r": self.r, "E": self.E, "E1": self.E1, "O_sum": self.O_sum, "lhs_sup": self.lhs_sup,
                "lhs_int": self.lhs_int, "rhs": self.rhs, "z_r": self.z_r}


@dataclass
class PoincareReport:
    x: list
    theta: float
    skipped: bool
    reason: str = ""
    rows: list = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {"x": self.x, "theta": self.theta, "skipped": self.skipped, "reason": self.reason,
                "rows": [r.to_dict() for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def poincare_experiment(u, measure: DiscreteMeasure, field: HomogeneousField, x, radii, chart=None,
                        rho: float | None = None, per_unit: int = 20, n_dirs: int = 64,
                        quad_per_axis: int = 48) -> PoincareReport:
    """Both sides of the weak Poincaré inequality at each radius.

    z_r minimises E^1_{r,z} + sum_i O_{r,z+e_i} over a lattice of Q(n); the interpolant
    takes the vertex values of u_{r,x}(h) = u(x + r h).
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    rho = rho_of(n) if rho is None else rho
    chart = chart or chart_for_field(field)
    theta = density_estimate(measure, x)
    rep = PoincareReport(x.tolist(), theta, theta > 0)
    if rep.skipped:
        rep.reason = f"upper density estimate {theta:.4g} > 0"
        return rep
    lattice = q_lattice(n, rho, per_unit)
    shifts = np.vstack([np.zeros(n), np.eye(n)])
    quad, cell = _disc_quadrature(rho / 2, n, quad_per_axis)
    sup_pts = quad
    for r in radii:
        r = float(r)
        Fr = rescale(field, x, r)

        def u_rx(h, r=r):
            return u(x + r * np.atleast_2d(h))

        verts_all = np.round((lattice[:, None, :] + shifts) * per_unit).astype(np.int64).reshape(-1, n)
        keys, inv = np.unique(verts_all, axis=0, return_inverse=True)
        O = radial_variation(u_rx, Fr, keys / per_unit, n_dirs)
        O_sum = O[inv.ravel()].reshape(len(lattice), n + 1).sum(axis=1)
        skels = build_skeletons(field, x, r, lattice, rho)
        W = u_rx(simplex_vertices(lattice).reshape(-1, n)).reshape(len(lattice), n + 1, n)
        E1 = np.array([SkeletonSeminorm(s).eval_truncated(W[k]) for k, s in enumerate(skels)])
        score = E1 + O_sum
        k = int(np.argmin(score))
        z_r = lattice[k]
        E = float(SkeletonSeminorm(skels[k]).eval(W[k]))
        a = rigid_interpolant(chart, x, r, z_r, W[k])
        lhs_sup = float(np.max(op_norm(a.e_curvilinear(sup_pts))))
        diff = np.linalg.norm(u_rx(quad) - a(quad), axis=1)
        lhs_int = float(np.sum(np.minimum(diff, 1.0)) * cell)
        rhs = measure.pushforward(x, r).ball(np.zeros(n), 1.0) / r ** (n - 1)
        rep.rows.append(PoincareRow(r, E, float(E1[k]), float(O_sum[k]), lhs_sup, lhs_int, float(rhs), z_r.tolist()))
    return rep
