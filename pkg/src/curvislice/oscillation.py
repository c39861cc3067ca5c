"""Radial oscillation of slices and the bracket oscillation over a finite family of admissible fields."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter1d

from .field_core import HomogeneousField, fq_tensor, rescale
from .geodesics import rk4_samples
from .measures import direction_lattice

DEFAULT_LEVELS = 256
DEFAULT_NODES = 64
DEFAULT_RHO = 0.5
DEFAULT_RADII = (0.05, 0.025, 0.0125, 0.00625)
XI_BOUND = 0.25  # 1 / c(2) with c(s) = s^2


def half_open_grid(rho: float, nodes: int):
    """Nodes t_i = -rho/4 + i dt, i < nodes, covering [-rho/4, rho/4)."""
    dt = (rho / 2) / nodes
    return -rho / 4 + dt * np.arange(nodes), dt


@dataclass
class LipschitzFit:
    t: np.ndarray
    theta: np.ndarray
    objective: float
    weights: np.ndarray
    checksum: str
    levels: np.ndarray


def osc_1d(f_values, t, n: int, levels: int = DEFAULT_LEVELS) -> LipschitzFit:
    """Globally optimal 1-Lipschitz fit of f under the truncated weighted L1 loss, on a value lattice.

    The lattice covers [min f - 1, max f + 1] with at least ``levels`` equal
    intervals; the spacing divides the node step so slope 1 is representable,
    and the midpoint of the range is a node.  Dynamic programming over the
    nodes with the slope constraint is exact on it.
    """
    f = np.asarray(f_values, dtype=float)
    t = np.asarray(t, dtype=float)
    if f.size < 32:
        raise ValueError("osc_1d needs at least 32 nodes")
    dt = float(t[1] - t[0])
    w = np.abs(t) ** (n - 1) * dt
    span = f.max() - f.min() + 2
    reach = int(np.ceil(dt / (span / levels) - 1e-9))
    dl = dt / reach
    half = int(np.ceil(span / 2 / dl - 1e-9))
    lat = 0.5 * (f.max() + f.min()) + dl * np.arange(-half, half + 1)
    levels = len(lat) - 1
    cost = w[:, None] * np.minimum(np.abs(f[:, None] - lat[None, :]), 1.0)
    V = np.empty_like(cost)
    V[0] = cost[0]
    for i in range(1, len(f)):
        V[i] = cost[i] + minimum_filter1d(V[i - 1], size=2 * reach + 1, mode="nearest")
    theta_idx = np.empty(len(f), dtype=int)
    theta_idx[-1] = int(np.argmin(V[-1]))
    for i in range(len(f) - 2, -1, -1):
        lo = max(theta_idx[i + 1] - reach, 0)
        hi = min(theta_idx[i + 1] + reach, levels) + 1
        theta_idx[i] = lo + int(np.argmin(V[i, lo:hi]))
    checksum = hashlib.sha256(np.round(V, 12).tobytes()).hexdigest()[:16]
    return LipschitzFit(t, lat[theta_idx], float(V[-1].min()), w, checksum, lat)


def truncated_l1(f, theta, weights) -> float:
    return float(np.sum(weights * np.minimum(np.abs(np.asarray(f) - np.asarray(theta)), 1.0)))


def radial_slices(u, gc, field: HomogeneousField, x, r: float, rho: float, directions, nodes: int = DEFAULT_NODES):
    """f_xi(t) = u(exp_x(r t xi)) . g(exp_x(r t xi), d/ds exp_x(s xi)) at s = r t, for all lattice xi."""
    t, dt = half_open_grid(rho, nodes)
    dirs = np.atleast_2d(directions)
    X = np.broadcast_to(np.asarray(x, dtype=float), dirs.shape)
    P, W, ok = rk4_samples(field, X, dirs, r * t)
    vals = np.full(ok.shape, np.nan)
    good = np.all(ok, axis=1)
    if np.any(good):
        p = P[good].reshape(-1, dirs.shape[1])
        w = W[good].reshape(-1, dirs.shape[1])
        vals[good] = np.sum(u(p) * gc(p, w), axis=1).reshape(-1, len(t))
    return t, vals, good


@dataclass
class OscReport:
    x: list
    radii: list
    osc_values: list
    bracket_values: list
    limsup: float
    dropped_directions: int
    grid_convention: str = "half-open [-rho/4, rho/4)"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def osc_integral(u, gc, field, x, r: float, rho: float = DEFAULT_RHO, n_directions: int | None = None,
                 nodes: int = DEFAULT_NODES, levels: int = DEFAULT_LEVELS, competitor=None):
    """Integral over the direction lattice of Osc_r of the radial slices at x.

    ``competitor`` optionally supplies 1-Lipschitz functions theta_xi(t) (array per direction);
    each slice then takes the smaller of the lattice optimum and the competitor's loss.
    """
    n = len(np.asarray(x))
    dirs, dsig = direction_lattice(n, n_directions)
    t, vals, good = radial_slices(u, gc, field, x, r, rho, dirs, nodes)
    total = 0.0
    dt = t[1] - t[0]
    for k in np.nonzero(good)[0]:
        fit = osc_1d(vals[k], t, n, levels)
        value = fit.objective
        # a competitor only counts where it is really 1-Lipschitz on the grid
        if competitor is not None and np.all(np.abs(np.diff(competitor[k])) <= dt * (1 + 1e-9)):
            value = min(value, truncated_l1(vals[k], competitor[k], fit.weights))
        total += value
    return total * dsig, int(np.sum(~good))


def osc_point(u, gc, field, x, rho: float = DEFAULT_RHO, radii=DEFAULT_RADII, n_directions: int | None = None,
              nodes: int = DEFAULT_NODES, levels: int = DEFAULT_LEVELS) -> OscReport:
    """Osc(u, x, rho) estimated by the max over the three smallest radii."""
    radii = sorted(radii, reverse=True)
    vals, dropped = [], 0
    for r in radii:
        v, d = osc_integral(u, gc, field, x, r, rho, n_directions, nodes, levels)
        vals.append(v)
        dropped += d
    return OscReport(list(map(float, x)), radii, vals, [], float(max(vals[-3:])), dropped)


# ---------------------------------------------------------------------------
# admissible fields: affine plus quadratic, constrained by the curvilinear symmetric gradient


def _quad_basis(n: int):
    return [(i, j) for i, j in itertools.combinations_with_replacement(range(n), 2)]


@dataclass(frozen=True)
class XiClassSpec:
    """Fields a(z) = b + M z + sum_k c_k q_k(z) on B_{rho/2}(0) for the rescaled field F_{r,x}."""

    field: HomogeneousField  # already rescaled
    radius: float
    bound: float = XI_BOUND
    lattice: int = 9

    @property
    def n(self) -> int:
        return self.field.dim

    @property
    def n_params(self) -> int:
        n = self.n
        return n + n * n + n * len(_quad_basis(n))

    def unpack(self, p):
        n = self.n
        b = p[:n]
        M = p[n:n + n * n].reshape(n, n)
        C = p[n + n * n:].reshape(n, -1)  # component j, monomial k
        return b, M, C

    def eval(self, p, z) -> np.ndarray:
        b, M, C = self.unpack(p)
        mono = np.stack([z[:, i] * z[:, j] for i, j in _quad_basis(self.n)], axis=1)
        return b + z @ M.T + mono @ C.T

    def grad(self, p, z) -> np.ndarray:
        """D a(z), shape (B, n, n) with [j, i] = d a_j / d z_i."""
        b, M, C = self.unpack(p)
        G = np.broadcast_to(M, (len(z), self.n, self.n)).copy()
        for k, (i, j) in enumerate(_quad_basis(self.n)):
            G[:, :, i] += C[:, k][None, :] * z[:, j : j + 1]
            G[:, :, j] += C[:, k][None, :] * z[:, i : i + 1]
        return G

    def constraint_points(self) -> np.ndarray:
        s = np.linspace(-self.radius, self.radius, self.lattice)
        g = np.stack(np.meshgrid(*([s] * self.n), indexing="ij"), -1).reshape(-1, self.n)
        return g[np.linalg.norm(g, axis=1) <= self.radius]

    def operator(self, p, z) -> np.ndarray:
        """E(a)(z) = sym D a(z) + sum_l a_l(z) F^q_l(z), whose quadratic form bounds d/dt a(gamma) . gamma'."""
        G = self.grad(p, z)
        sym = 0.5 * (G + np.swapaxes(G, 1, 2))
        a = self.eval(p, z)
        return sym + np.einsum("bl,blij->bij", a, fq_tensor(self.field, z))

    def norm(self, p, z=None) -> float:
        z = self.constraint_points() if z is None else z
        return float(np.abs(np.linalg.eigvalsh(self.operator(p, z))).max())


def _disc_quadrature(radius: float, n: int, per_axis: int = 48):
    h = 2 * radius / per_axis
    s = -radius + h * (np.arange(per_axis) + 0.5)
    g = np.stack(np.meshgrid(*([s] * n), indexing="ij"), -1).reshape(-1, n)
    keep = np.linalg.norm(g, axis=1) < radius
    return g[keep], h**n


@dataclass
class BracketResult:
    objective: float
    params: np.ndarray
    feasible: bool
    fallback: bool
    constraint: float


def bracket_osc(u, field: HomogeneousField, x, rho: float, r: float, seed: int = 0, restarts: int = 3,
                rounds: int = 40) -> BracketResult:
    """min over the admissible subset of the integral over B_{rho/2} of |u(x + r z) - a(z)| ^ 1."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    spec = XiClassSpec(rescale(field, x, r), rho / 2)
    z, vol = _disc_quadrature(rho / 2, n)
    target = np.asarray(u(x + r * z), dtype=float)
    zc = spec.constraint_points()

    def objective(p):
        return float(np.sum(np.minimum(np.linalg.norm(target - spec.eval(p, z), axis=1), 1.0)) * vol)

    def penalized(p):
        return objective(p) + 10.0 * max(0.0, spec.norm(p, zc) - spec.bound)

    def make_feasible(p):
        if spec.norm(p, zc) <= spec.bound:
            return p
        b = p.copy()
        b[n:] = 0.0
        if spec.norm(b, zc) <= spec.bound:
            lo, hi = 0.0, 1.0
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                q = b.copy()
                q[n:] = mid * p[n:]
                lo, hi = (mid, hi) if spec.norm(q, zc) <= spec.bound else (lo, mid)
            q = b.copy()
            q[n:] = lo * p[n:]
            return q
        return p * (spec.bound / spec.norm(p, zc)) * (1 - 1e-12)

    # least-squares affine fit of the target as the first start
    A = np.concatenate([np.ones((len(z), 1)), z], axis=1)
    coef = np.linalg.lstsq(A, target, rcond=None)[0]
    p_ls = np.zeros(spec.n_params)
    p_ls[:n] = coef[0]
    p_ls[n:n + n * n] = coef[1:].T.ravel()
    p_med = np.zeros(spec.n_params)
    p_med[:n] = np.median(target, axis=0)
    rng = np.random.default_rng(seed)
    starts = [p_ls, p_med, p_ls + 0.1 * rng.standard_normal(spec.n_params)][:restarts]

    best = None
    for p0 in starts:
        p = make_feasible(p0)
        val = penalized(p)
        step = 0.25
        for _ in range(rounds):
            improved = False
            for k in range(spec.n_params):
                for sgn in (1.0, -1.0):
                    q = p.copy()
                    q[k] += sgn * step
                    v = penalized(q)
                    if v < val - 1e-15:
                        p, val, improved = q, v, True
                        break
            if not improved:
                step *= 0.5
                if step < 1e-6:
                    break
        p = make_feasible(p)
        cand = (objective(p), p)
        if best is None or cand[0] < best[0]:
            best = cand
    obj, p = best
    feasible = spec.norm(p, zc) <= spec.bound * (1 + 1e-9)
    if not feasible:
        p = np.zeros(spec.n_params)
        obj = objective(p)
    return BracketResult(obj, p, feasible, not feasible, spec.norm(p, zc))


def competitor_slices(res: BracketResult, gc, field: HomogeneousField, x, r: float, rho: float, directions,
                      nodes: int = DEFAULT_NODES):
    """theta_xi(t) = a(z(t)) . g(x + r z(t), z'(t)) along the rescaled geodesics z(t) = (exp_x(r t xi) - x)/r."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    spec = XiClassSpec(rescale(field, x, r), rho / 2)
    t, _ = half_open_grid(rho, nodes)
    dirs = np.atleast_2d(directions)
    Z, Zd, ok = rk4_samples(spec.field, np.zeros_like(dirs), dirs, t)
    flatZ = np.nan_to_num(Z.reshape(-1, n))
    flatV = np.nan_to_num(Zd.reshape(-1, n))
    theta = np.sum(spec.eval(res.params, flatZ) * gc(x + r * flatZ, flatV), axis=1)
    return theta.reshape(len(dirs), len(t)), np.all(ok, axis=1)


@dataclass
class DominationRow:
    r: float
    lhs: float
    rhs: float
    holds: bool


def domination_check(u, gc, field, x, rho: float = DEFAULT_RHO, radii=DEFAULT_RADII, n_directions: int | None = None,
                     nodes: int = DEFAULT_NODES, seed: int = 0) -> list[DominationRow]:
    """Per radius: integral of Osc_r over directions versus the bracket objective."""
    n = len(np.asarray(x))
    dirs, _ = direction_lattice(n, n_directions)
    rows = []
    for r in radii:
        res = bracket_osc(u, field, x, rho, r, seed=seed)
        theta, _ = competitor_slices(res, gc, field, x, r, rho, dirs, nodes)
        lhs, _ = osc_integral(u, gc, field, x, r, rho, n_directions, nodes, competitor=theta)
        rows.append(DominationRow(float(r), lhs, res.objective, bool(lhs <= res.objective)))
    return rows


def report_json(rep: OscReport) -> str:
    return json.dumps(rep.to_dict(), sort_keys=True)
