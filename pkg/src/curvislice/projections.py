"""Curvilinear projections built from the geodesic flow of a 2-homogeneous field.

For a unit direction xi and a base point x0 the parametrization phi_xi sends
y + t xi (y orthogonal to xi) to the point reached at time t by the geodesic
that leaves x0 + y with velocity xi.  The projection P_xi is pi_xi composed
with the inverse of phi_xi.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field_core import DomainError, HomogeneousField, euclidean, rescale
from .geodesics import InversionFailure, exp_inverse, newton_batch, rk4_flow

RK4_STEPS = 128
PROJECT_TOL = 1e-12
C_PRIME_GRID = np.arange(1, 33) / 33.0
C_DOUBLEPRIME_CAP = 100.0
SPHERE_STEP = 1e-3


class ConstructionFailure(RuntimeError):
    """No dyadic scale produced a transversal, invertible family."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def tangent_basis(xi) -> np.ndarray:
    """Orthonormal bases of xi^perp, shape (B, n, n-1), via a Householder reflection."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    B, n = xi.shape
    sign = np.where(xi[:, 0] >= 0, 1.0, -1.0)
    v = xi.copy()
    v[:, 0] += sign
    H = np.eye(n)[None] - 2 * v[:, :, None] * v[:, None, :] / np.sum(v * v, axis=1)[:, None, None]
    # H e_1 = -sign * xi, so the remaining columns span xi^perp
    return H[:, :, 1:]


def sphere_exp(xi: np.ndarray, E: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Great-circle step from xi along the tangent vector E s."""
    tang = np.einsum("bij,bj->bi", E, s)
    ang = np.linalg.norm(tang, axis=1, keepdims=True)
    safe = np.where(ang > 0, ang, 1.0)
    return np.cos(ang) * xi + np.sin(ang) * tang / safe


@dataclass(frozen=True)
class FiberCoordinates:
    y: np.ndarray
    t: np.ndarray
    xi_phi: np.ndarray
    residual: np.ndarray


@dataclass(frozen=True)
class ProjectionFamily:
    field: HomogeneousField
    x0: np.ndarray
    R0: float
    steps: int = RK4_STEPS
    report: "TransversalityReport | None" = None

    @property
    def dim(self) -> int:
        return self.field.dim

    def param(self, xi, y, t):
        """phi_xi(y + t xi) and its velocity; batched over rows."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        B = max(len(xi), len(y))
        xi = np.broadcast_to(xi, (B, self.dim))
        y = np.broadcast_to(y, (B, self.dim))
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        res = rk4_flow(self.field, self.x0 + y, xi, t, self.steps)
        return res.positions, res.velocities, res.ok

    def param_w(self, xi, w):
        """phi_xi evaluated at a point w of R^n, split as w = pi_xi w + (xi . w) xi."""
        t = np.sum(w * xi, axis=1)
        return self.param(xi, w - t[:, None] * xi, t)

    def at_scale(self, r: float) -> "ProjectionFamily":
        """The rescaled family on B_1(0) built from F_{r, x0}."""
        return ProjectionFamily(rescale(self.field, self.x0, r), np.zeros(self.dim), 1.0, self.steps)

    def patch(self, xi) -> np.ndarray:
        """Index i of a cap S_i containing xi; the largest coordinate always qualifies."""
        return np.argmax(np.abs(np.atleast_2d(xi)), axis=1)


def make_family(field: HomogeneousField, x0, R0: float, steps: int = RK4_STEPS) -> ProjectionFamily:
    return ProjectionFamily(field, np.asarray(x0, dtype=float), float(R0), steps)


def project(family: ProjectionFamily, xi, x, tol: float = PROJECT_TOL, check_domain: bool = True,
            strict: bool = True) -> FiberCoordinates:
    """Fiber coordinates (P_xi(x), t^xi_x, xi_phi(x)) by Newton on phi_xi."""
    n = family.dim
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    B = max(len(x), len(xi))
    x = np.broadcast_to(x, (B, n))
    xi = np.ascontiguousarray(np.broadcast_to(_unit(xi), (B, n)))
    if check_domain:
        out = np.linalg.norm(x - family.x0, axis=1) > family.R0 * (1 + 1e-12)
        if np.any(out):
            raise DomainError(x[np.argmax(out)])

    def fun(w, idx):
        pos, _, ok = family.param_w(xi[idx], w)
        return np.where(ok[:, None], pos, 1e100)

    # straight-line initializer from the flat collapse
    res = newton_batch(fun, x, x - family.x0, tol=tol)
    if strict and not np.all(res.converged):
        bad = np.argmax(res.residual)
        raise InversionFailure(f"projection did not converge at {x[bad]}", float(res.residual[bad]))
    w = res.solution
    t = np.sum(w * xi, axis=1)
    y = w - t[:, None] * xi
    _, vel, _ = family.param(xi, y, t)
    return FiberCoordinates(y, t, vel, res.residual)


def psi(family: ProjectionFamily, xi, x, tol: float = PROJECT_TOL) -> np.ndarray:
    """Normalized velocity field xi_phi(x)/|xi_phi(x)|."""
    return _unit(project(family, xi, x, tol=tol, check_domain=False).xi_phi)


def _stereo(xi, omega, E):
    return np.einsum("bij,bi->bj", E, xi) / (1 + np.sum(xi * omega, axis=1))[:, None]


def _stereo_inv(s, omega, E):
    q = np.sum(s * s, axis=1)[:, None]
    return ((1 - q) * omega + 2 * np.einsum("bij,bj->bi", E, s)) / (1 + q)


def invert_psi(family: ProjectionFamily, x, omega, tol: float = 1e-11) -> np.ndarray:
    """Solve psi_x(xi) = omega on the sphere, in stereographic coordinates centred at omega."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    omega = _unit(np.atleast_2d(np.asarray(omega, dtype=float)))
    B, n = omega.shape
    x = np.ascontiguousarray(np.broadcast_to(x, (B, n)))
    E = tangent_basis(omega)

    def fun(s, idx):
        xi = _stereo_inv(s, omega[idx], E[idx])
        return _stereo(psi(family, xi, x[idx]), omega[idx], E[idx])

    res = newton_batch(fun, np.zeros((B, n - 1)), np.zeros((B, n - 1)), tol=tol)
    if not np.all(res.converged):
        bad = np.argmax(res.residual)
        raise InversionFailure(f"psi inversion did not converge at {omega[bad]}", float(res.residual[bad]))
    return _stereo_inv(res.solution, omega, E)


@dataclass(frozen=True)
class RetractionMap:
    """z -> phi_x(z) on the unit sphere for z near the centre x."""

    family: ProjectionFamily
    center: np.ndarray

    def eval(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        zeta = exp_inverse(self.family.field, self.center, z, steps=self.family.steps)
        return invert_psi(self.family, self.center, _unit(zeta))

    def jacobian(self, z, step: float = 1e-5) -> np.ndarray:
        """(n-1)-dimensional Jacobian of phi_x at each z, by central differences."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        B, n = z.shape
        stack = [z]
        for k in range(n):
            stack += [z + step * np.eye(n)[k], z - step * np.eye(n)[k]]
        vals = self.eval(np.concatenate(stack)).reshape(2 * n + 1, B, n)
        D = np.stack([(vals[1 + 2 * k] - vals[2 + 2 * k]) / (2 * step) for k in range(n)], axis=2)
        Et = tangent_basis(vals[0])
        Dt = np.einsum("bik,bij->bkj", Et, D)
        return np.sqrt(np.abs(np.linalg.det(Dt @ np.swapaxes(Dt, 1, 2))))

    def jacobian_bounds(self, radius: float, count: int = 200, seed: int = 0):
        """(C'_x, C_x): min and max of |J phi_x(z)| |z - x|^(n-1) on radius/2 < |z - x| < radius."""
        z = annulus_samples(self.center, radius, count, seed)
        d = np.linalg.norm(z - self.center, axis=1)
        q = self.jacobian(z) * d ** (len(self.center) - 1)
        return float(q.min()), float(q.max())


def annulus_samples(center, radius: float, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = len(center)
    dirs = _unit(rng.standard_normal((count, n)))
    rad = radius * (0.5 + 0.5 * rng.random(count))
    return np.asarray(center) + rad[:, None] * dirs


def retraction(family: ProjectionFamily, x, z) -> np.ndarray:
    return RetractionMap(family, np.asarray(x, dtype=float)).eval(z)


def ball_samples(rng, count: int, n: int, radius: float = 1.0) -> np.ndarray:
    dirs = _unit(rng.standard_normal((count, n)))
    return radius * rng.random(count)[:, None] ** (1.0 / n) * dirs


def patch_directions(rng, count: int, n: int, patch: int) -> np.ndarray:
    out = []
    while sum(len(o) for o in out) < count:
        xi = _unit(rng.standard_normal((4 * count, n)))
        out.append(xi[np.abs(xi[:, patch]) >= 1 / np.sqrt(n)])
    return np.concatenate(out)[:count]


def _stencil(n: int) -> np.ndarray:
    return np.array(list(itertools.product((-1, 0, 1), repeat=n - 1)), dtype=float)


@dataclass(frozen=True)
class QuotientDerivatives:
    """Difference quotient (P x - P x')/|x - x'| and its spherical derivatives at xi."""

    Q: np.ndarray  # (B, n)
    DQ: np.ndarray  # (B, n, n-1)
    D2Q: np.ndarray  # (B, n, n-1, n-1)
    DP: np.ndarray  # derivatives of P_xi(x) itself, (B, n, n-1)
    D2P: np.ndarray
    E: np.ndarray
    converged: np.ndarray


def quotient_derivatives(family: ProjectionFamily, xi, x, xp, h: float = SPHERE_STEP) -> QuotientDerivatives:
    xi = _unit(np.atleast_2d(xi))
    B, n = xi.shape
    E = tangent_basis(xi)
    st = _stencil(n)
    S = len(st)
    xis = np.concatenate([sphere_exp(xi, E, np.broadcast_to(h * o, (B, n - 1))) for o in st])
    pts = np.concatenate([np.tile(x, (S, 1)), np.tile(xp, (S, 1))])
    fc = project(family, np.concatenate([xis, xis]), pts, check_domain=False, strict=False)
    conv = fc.residual.reshape(2, S, B).max(axis=(0, 1)) < 1e-9
    P = fc.y.reshape(2, S, B, n)
    dist = np.linalg.norm(x - xp, axis=1)[None, :, None]
    Qs = (P[0] - P[1]) / dist

    def derivs(F):
        idx = {tuple(o.astype(int)): k for k, o in enumerate(st)}
        zero = (0,) * (n - 1)
        D1 = np.empty((B, n, n - 1))
        D2 = np.empty((B, n, n - 1, n - 1))
        for a in range(n - 1):
            ea = np.zeros(n - 1, dtype=int)
            ea[a] = 1
            p, m = idx[tuple(ea)], idx[tuple(-ea)]
            D1[:, :, a] = (F[p] - F[m]) / (2 * h)
            D2[:, :, a, a] = (F[p] - 2 * F[idx[zero]] + F[m]) / h**2
            for b in range(a + 1, n - 1):
                eb = np.zeros(n - 1, dtype=int)
                eb[b] = 1
                mixed = (F[idx[tuple(ea + eb)]] - F[idx[tuple(ea - eb)]] - F[idx[tuple(eb - ea)]]
                         + F[idx[tuple(-ea - eb)]]) / (4 * h**2)
                D2[:, :, a, b] = D2[:, :, b, a] = mixed
        return F[idx[zero]], D1, D2

    Q, DQ, D2Q = derivs(Qs)
    _, DP, D2P = derivs(P[0])
    return QuotientDerivatives(Q, DQ, D2Q, DP, D2P, E, conv)


def jacobian_full(qd: QuotientDerivatives) -> np.ndarray:
    """det(E^T D_xi Q E) for the quotient valued in xi^perp."""
    return np.linalg.det(np.einsum("bij,bik->bjk", qd.E, qd.DQ))


def flat_jacobian(xi, x, xp) -> np.ndarray:
    d = x - xp
    n = d.shape[1]
    return (-1.0) ** (n - 1) * (np.sum(d * xi, axis=1) / np.linalg.norm(d, axis=1)) ** (n - 1)


def drop(a: np.ndarray, i: int) -> np.ndarray:
    return np.delete(a, i, axis=1)


@dataclass
class PatchReport:
    patch: int
    C_prime: float
    C_doubleprime: float
    sup_d1: float
    sup_d2: float
    n_samples: int
    verdict: str
    implication_pairs: np.ndarray = dc_field(repr=False)

    def to_dict(self) -> dict:
        return {
            "patch": self.patch,
            "C_prime": self.C_prime,
            "C_doubleprime": self.C_doubleprime,
            "sup_d1": self.sup_d1,
            "sup_d2": self.sup_d2,
            "n_samples": self.n_samples,
            "verdict": self.verdict,
        }


@dataclass
class TransversalityReport:
    patches: list
    flat_error: float | None = None

    @property
    def verdict(self) -> str:
        return "pass" if all(p.verdict == "pass" for p in self.patches) else "fail"

    @property
    def C_prime(self) -> float:
        return min(p.C_prime for p in self.patches)

    def to_json(self) -> str:
        return json.dumps([p.to_dict() for p in self.patches], indent=2, sort_keys=True)


def largest_c_prime(absT: np.ndarray, absJ: np.ndarray) -> float:
    best = 0.0
    for c in C_PRIME_GRID:
        if np.any((absT <= c) & (absJ < c)):
            break
        best = float(c)
    return best


def sample_triples(family: ProjectionFamily, patch: int, n_samples: int, seed: int):
    rng = np.random.default_rng([seed, patch])
    n = family.dim
    xi = patch_directions(rng, n_samples, n, patch)
    x = family.x0 + ball_samples(rng, n_samples, n, family.R0)
    xp = family.x0 + ball_samples(rng, n_samples, n, family.R0)
    return xi, x, xp


def verify_transversality(family: ProjectionFamily, n_samples: int = 200, seed: int = 0,
                          h: float = SPHERE_STEP) -> TransversalityReport:
    """Empirical check of the transversality conditions, patch by patch."""
    n = family.dim
    patches = []
    flat_err = 0.0 if family.field.is_flat else None
    for i in range(n):
        xi, x, xp = sample_triples(family, i, n_samples, seed)
        qd = quotient_derivatives(family, xi, x, xp, h)
        T = drop(qd.Q, i)
        DT = drop(qd.DQ, i)
        D2T = drop(qd.D2Q, i)
        absT = np.linalg.norm(T, axis=1)
        absJ = np.abs(np.linalg.det(DT))
        cp = largest_c_prime(absT, absJ)
        cpp = float(max(np.abs(DT).max(), np.abs(D2T).max()))
        sup1 = float(np.abs(drop(qd.DP, i)).max())
        sup2 = float(np.abs(drop(qd.D2P, i)).max())
        ok = (cp > 0 and cpp <= C_DOUBLEPRIME_CAP and max(sup1, sup2) <= C_DOUBLEPRIME_CAP
              and bool(np.all(qd.converged)))
        patches.append(PatchReport(i, cp, cpp, sup1, sup2, n_samples, "pass" if ok else "fail",
                                   np.stack([absT, absJ], axis=1)))
        if flat_err is not None:
            flat_err = max(flat_err, float(np.abs(jacobian_full(qd) - flat_jacobian(xi, x, xp)).max()))
    return TransversalityReport(patches, flat_err)


def c2_distance_to_straight(family: ProjectionFamily, n_samples: int = 100, seed: int = 0,
                            h: float = SPHERE_STEP) -> float:
    """max over sampled triples and patches of the C^2 gap between T^i and the straight quotient."""
    flat = ProjectionFamily(euclidean(family.dim), family.x0, family.R0, family.steps)
    worst = 0.0
    for i in range(family.dim):
        xi, x, xp = sample_triples(family, i, n_samples, seed)
        a = quotient_derivatives(family, xi, x, xp, h)
        b = quotient_derivatives(flat, xi, x, xp, h)
        for u, v in ((a.Q, b.Q), (a.DQ, b.DQ), (a.D2Q, b.D2Q)):
            worst = max(worst, float(np.abs(drop(u, i) - drop(v, i)).max()))
    return worst


def inversion_grid_ok(family: ProjectionFamily, n_dirs: int = 8, per_axis: int = 5) -> bool:
    n = family.dim
    rng = np.random.default_rng(7)
    pts = ball_samples(rng, per_axis**n, n, family.R0) + family.x0
    xi = _unit(rng.standard_normal((n_dirs, n)))
    X = np.repeat(pts, n_dirs, axis=0)
    XI = np.tile(xi, (len(pts), 1))
    try:
        fc = project(family, XI, X)
    except InversionFailure:
        return False
    rec, _, ok = family.param(XI, fc.y, fc.t)
    return bool(np.all(ok) and np.abs(rec - X).max() < 1e-8)


def build_family(field: HomogeneousField, x0, r_cap: float = 1.0, levels: int = 8,
                 n_samples: int = 200, seed: int = 0) -> ProjectionFamily:
    """Largest dyadic R0 <= r_cap at which the rescaled family is transversal and invertible."""
    x0 = np.asarray(x0, dtype=float)
    base = make_family(field, x0, r_cap)
    report = None
    for k in range(levels):
        r = r_cap / 2**k
        scaled = base.at_scale(r)
        report = verify_transversality(scaled, n_samples, seed)
        if report.verdict == "pass" and inversion_grid_ok(scaled):
            return ProjectionFamily(field, x0, r, base.steps, report)
    raise ConstructionFailure("no dyadic scale passed", report)


def _fd_wrt_points(fun, Z, step=1e-5):
    n = Z.shape[1]
    cols = [(fun(Z + step * np.eye(n)[k]) - fun(Z - step * np.eye(n)[k])) / (2 * step) for k in range(n)]
    return np.stack(cols, axis=-1)


def convergence_study(field: HomogeneousField, x0, radii, n_dirs: int = 16, n_points: int = 64, seed: int = 0,
                      steps: int = RK4_STEPS) -> list[dict]:
    """C^0/C^1 distances of the rescaled projections and parametrizations to the straight ones."""
    x0 = np.asarray(x0, dtype=float)
    n = len(x0)
    rng = np.random.default_rng(seed)
    from .geodesics import sphere_directions

    xi = sphere_directions(n, n_dirs)
    pts = ball_samples(rng, n_points, n, 0.9)
    XI = np.repeat(xi, len(pts), axis=0)
    Z = np.tile(pts, (len(xi), 1))
    rows = []
    for r in radii:
        fam = make_family(field, x0, 1.0, steps).at_scale(r)

        def P(z):
            return project(fam, XI, z, check_domain=False).y

        def phi(w):
            return fam.param_w(XI, w)[0]

        straight = Z - np.sum(Z * XI, axis=1)[:, None] * XI
        p0 = float(np.abs(P(Z) - straight).max())
        dp = _fd_wrt_points(P, Z)
        proj = np.eye(n)[None] - XI[:, :, None] * XI[:, None, :]
        p1 = float(np.abs(dp - proj).max())
        f0 = float(np.abs(phi(Z) - Z).max())
        f1 = float(np.abs(_fd_wrt_points(phi, Z) - np.eye(n)[None]).max())
        rows.append({"r": float(r), "P_c0": p0, "P_c1": p1, "Phi_c0": f0, "Phi_c1": f1})
    return rows


def write_convergence_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["r", "P_c0", "P_c1", "Phi_c0", "Phi_c1"])
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) for k, v in row.items()})
