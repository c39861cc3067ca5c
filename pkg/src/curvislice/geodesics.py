"""Geodesic integration for second-order systems driven by a 2-homogeneous field.

Two integration paths coexist.  ``integrate`` produces a single path on a
near-uniform node grid (the adaptive stepper is capped at the node spacing),
which is what residual and drift diagnostics need.  ``flow`` advances a whole
batch of initial conditions to per-trajectory end times in one adaptive solve
by integrating in the rescaled time s = t / T.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.integrate import RK45, solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .field_core import HomogeneousField

TOL = 1e-9
MAX_STEPS = 1_000_000
BLOWUP_SPEED = 1e6
NODE_SPACING = 2e-3


class InversionFailure(RuntimeError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (best residual {residual:.3e})")


class BVPFailure(InversionFailure):
    pass


@dataclass(frozen=True)
class GeodesicPath:
    t_grid: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    field_id: str
    exit_reason: str = "ok"
    accelerations: np.ndarray | None = None

    @property
    def complete(self) -> bool:
        return self.exit_reason == "ok"

    def _splines(self):
        order = np.argsort(self.t_grid)
        t = self.t_grid[order]
        pos = CubicHermiteSpline(t, self.points[order], self.velocities[order], axis=0)
        vel = CubicHermiteSpline(t, self.velocities[order], self.accelerations[order], axis=0)
        return pos, vel

    def position(self, t) -> np.ndarray:
        return self._splines()[0](t)

    def velocity(self, t) -> np.ndarray:
        return self._splines()[1](t)

    def ode_residual(self, field: HomogeneousField) -> np.ndarray:
        """|second-difference acceleration - F| / (1 + |velocity|^2) at interior nodes."""
        t, x, v = self.t_grid, self.points, self.velocities
        if t.size < 3:
            return np.zeros(0)
        h1 = (t[1:-1] - t[:-2])[:, None]
        h2 = (t[2:] - t[1:-1])[:, None]
        acc = 2.0 * ((x[2:] - x[1:-1]) / h2 - (x[1:-1] - x[:-2]) / h1) / (h1 + h2)
        f = field.raw(x[1:-1], v[1:-1])
        speed2 = np.sum(v[1:-1] ** 2, axis=-1)
        return np.linalg.norm(acc - f, axis=-1) / (1.0 + speed2)

    def to_csv(self, path) -> None:
        n = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)])
            for t, x, v in zip(self.t_grid, self.points, self.velocities):
                w.writerow([repr(float(t))] + [repr(float(a)) for a in x] + [repr(float(b)) for b in v])


def integrate(field: HomogeneousField, x, xi, t_end: float, tol: float = TOL, node_spacing: float = NODE_SPACING) -> GeodesicPath:
    """Solve gamma'' = F(gamma, gamma') from (x, xi) up to t_end (which may be negative)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    n = x.size
    t_end = float(t_end)
    y0 = np.concatenate([x, xi])
    if t_end == 0.0:
        acc = field.raw(x, xi)[None]
        return GeodesicPath(np.zeros(1), x[None], xi[None], field.name, "ok", acc)

    def rhs(_t, y):
        return np.concatenate([y[n:], field.raw(y[:n], y[n:])])

    step = min(node_spacing, abs(t_end))
    solver = RK45(rhs, 0.0, y0, t_end, rtol=tol, atol=tol, max_step=step, first_step=step)
    ts, ys = [0.0], [y0]
    reason = "ok"
    for _ in range(MAX_STEPS):
        if solver.status != "running":
            break
        msg = solver.step()
        if solver.status == "failed":
            reason = f"integrator failure: {msg}"
            break
        y = solver.y
        if not np.all(np.isfinite(y)) or np.linalg.norm(y[n:]) > BLOWUP_SPEED:
            reason = "blow-up"
            break
        if not bool(np.all(field.domain(y[:n]))):
            reason = "domain exit"
            break
        ts.append(solver.t)
        ys.append(y.copy())
    else:
        reason = "step limit"
    ys = np.array(ys)
    acc = field.raw(ys[:, :n], ys[:, n:])
    return GeodesicPath(np.array(ts), ys[:, :n], ys[:, n:], field.name, reason, acc)


# ---------------------------------------------------------------------------
# batched flow


@dataclass(frozen=True)
class FlowResult:
    positions: np.ndarray
    velocities: np.ndarray
    ok: np.ndarray


def flow(field: HomogeneousField, X, V, T, tol: float = TOL) -> FlowResult:
    """Advance every (X[b], V[b]) by time T[b]; T may be scalar.

    Trajectories that leave the field domain or exceed the blow-up speed are
    frozen and reported with ok = False.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    B, n = X.shape
    T = np.broadcast_to(np.asarray(T, dtype=float), (B,)).copy()
    if B == 0:
        return FlowResult(X.copy(), V.copy(), np.ones(0, dtype=bool))

    def rhs(_s, y):
        y = y.reshape(B, 2 * n)
        u, U = y[:, :n], y[:, n:]
        live = np.all(np.isfinite(y), axis=1) & (np.linalg.norm(U, axis=1) < BLOWUP_SPEED)
        live &= np.asarray(field.domain(u), dtype=bool)
        out = np.zeros_like(y)
        if np.any(live):
            out[live, :n] = T[live, None] * U[live]
            out[live, n:] = T[live, None] * field.raw(u[live], U[live])
        return out.ravel()

    y0 = np.concatenate([X, V], axis=1).ravel()
    if field.is_flat:
        pos, vel = X + T[:, None] * V, V.copy()
    else:
        sol = solve_ivp(rhs, (0.0, 1.0), y0, method="RK45", rtol=tol, atol=tol)
        y = sol.y[:, -1].reshape(B, 2 * n)
        pos, vel = y[:, :n], y[:, n:]
    ok = np.all(np.isfinite(pos), axis=1) & np.all(np.isfinite(vel), axis=1)
    ok &= np.linalg.norm(vel, axis=1) < BLOWUP_SPEED
    ok &= np.asarray(field.domain(pos), dtype=bool)
    return FlowResult(pos, vel, ok)


def flow_samples(field: HomogeneousField, X, V, t_grid, tol: float = TOL) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions/velocities at a shared sorted time grid (containing negative and positive times).

    Returns arrays of shape (B, len(t_grid), n) and an ok mask (B, len(t_grid)).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    B, n = X.shape
    P = np.full((B, t_grid.size, n), np.nan)
    W = np.full((B, t_grid.size, n), np.nan)
    if field.is_flat:
        P[:] = X[:, None, :] + t_grid[None, :, None] * V[:, None, :]
        W[:] = V[:, None, :]
    else:
        def rhs(_t, y):
            y = y.reshape(B, 2 * n)
            u, U = y[:, :n], y[:, n:]
            live = np.all(np.isfinite(y), axis=1) & (np.linalg.norm(U, axis=1) < BLOWUP_SPEED)
            live &= np.asarray(field.domain(u), dtype=bool)
            out = np.zeros_like(y)
            if np.any(live):
                out[live, :n] = U[live]
                out[live, n:] = field.raw(u[live], U[live])
            return out.ravel()

        y0 = np.concatenate([X, V], axis=1).ravel()
        for sign in (1.0, -1.0):
            sel = np.nonzero(sign * t_grid >= 0)[0] if sign > 0 else np.nonzero(t_grid < 0)[0]
            if sel.size == 0:
                continue
            ts = t_grid[sel]
            order = np.argsort(sign * ts)
            t_eval = ts[order]
            t_stop = t_eval[-1]
            if t_stop == 0.0:
                P[:, sel] = X[:, None]
                W[:, sel] = V[:, None]
                continue
            sol = solve_ivp(rhs, (0.0, t_stop), y0, method="RK45", rtol=tol, atol=tol, t_eval=t_eval)
            Y = sol.y.reshape(B, 2 * n, -1).transpose(0, 2, 1)
            got = Y.shape[1]
            idx = sel[order][:got]
            P[:, idx] = Y[:, :, :n]
            W[:, idx] = Y[:, :, n:]
    ok = np.all(np.isfinite(P), axis=2) & (np.linalg.norm(np.nan_to_num(W, nan=np.inf), axis=2) < BLOWUP_SPEED)
    ok &= np.asarray(field.domain(np.nan_to_num(P)), dtype=bool)
    return P, W, ok


def _rk4_step(field, y, h, n, live):
    def rhs(y):
        out = np.zeros_like(y)
        if np.any(live):
            out[live, :n] = y[live, n:]
            out[live, n:] = field.raw(y[live, :n], y[live, n:])
        return out

    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6


def _alive(field, y, n):
    ok = np.all(np.isfinite(y), axis=1) & (np.linalg.norm(y[:, n:], axis=1) < BLOWUP_SPEED)
    return ok & np.asarray(field.domain(np.nan_to_num(y[:, :n])), dtype=bool)


def rk4_flow(field: HomogeneousField, X, V, T, steps: int = 128) -> FlowResult:
    """Fixed-step classical Runge-Kutta version of ``flow``.

    The result is a smooth function of (X, V, T), which keeps finite-difference
    derivatives with respect to the initial data free of step-selection noise.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    B, n = X.shape
    T = np.broadcast_to(np.asarray(T, dtype=float), (B,)).copy()
    if field.is_flat:
        return FlowResult(X + T[:, None] * V, V.copy(), np.ones(B, dtype=bool))
    # every trajectory takes the same number of steps, each of length T / steps
    y = np.concatenate([X, V], axis=1)
    live = _alive(field, y, n)
    h = (T / steps)[:, None]
    for _ in range(steps):
        y_new = _rk4_step(field, y, h, n, live)
        y = np.where(live[:, None], y_new, y)
        live &= _alive(field, y, n)
    return FlowResult(y[:, :n], y[:, n:], live)


def rk4_samples(field: HomogeneousField, X, V, t_grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions/velocities on a uniform increasing grid by marching with the grid spacing."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    B, n = X.shape
    if field.is_flat:
        P = X[:, None, :] + t_grid[None, :, None] * V[:, None, :]
        W = np.broadcast_to(V[:, None, :], P.shape).copy()
        return P, W, np.ones((B, t_grid.size), dtype=bool)
    dt = float(t_grid[1] - t_grid[0])
    back = int(math.ceil(abs(t_grid[0]) / dt)) if t_grid[0] != 0 else 0
    start = rk4_flow(field, X, V, t_grid[0], steps=max(back, 1))
    y = np.concatenate([start.positions, start.velocities], axis=1)
    live = start.ok.copy()
    P = np.full((B, t_grid.size, n), np.nan)
    W = np.full((B, t_grid.size, n), np.nan)
    ok = np.zeros((B, t_grid.size), dtype=bool)
    for k in range(t_grid.size):
        if k:
            h = float(t_grid[k] - t_grid[k - 1])
            y_new = _rk4_step(field, y, h, n, live)
            y = np.where(live[:, None], y_new, y)
            live &= _alive(field, y, n)
        P[live, k] = y[live, :n]
        W[live, k] = y[live, n:]
        ok[:, k] = live
    return P, W, ok


@dataclass(frozen=True)
class FlowMap:
    field: HomogeneousField

    def eval(self, w, t, v):
        res = flow(self.field, w, v, t)
        return res.positions, res.velocities


# ---------------------------------------------------------------------------
# exponential map


def exp_map(field: HomogeneousField, x, xi, steps: int | None = None) -> np.ndarray:
    """exp_x(xi), batched over leading axes of xi (x broadcast).

    ``steps`` selects the fixed-step integrator instead of the adaptive one.
    """
    xi = np.asarray(xi, dtype=float)
    flat = xi.reshape(-1, xi.shape[-1])
    X = np.broadcast_to(np.asarray(x, dtype=float), flat.shape)
    res = flow(field, X, flat, 1.0) if steps is None else rk4_flow(field, X, flat, 1.0, steps)
    pos = np.where(res.ok[:, None], res.positions, np.nan)
    return pos.reshape(xi.shape)


def _fd_jacobian(fun, Z: np.ndarray, idx: np.ndarray, step: float = 1e-6):
    """Central-difference Jacobians of a batched map; returns (values, J).

    ``fun(Z, idx)`` receives the batch index of every row so per-item data can be looked up.
    """
    B, n = Z.shape
    h = step * np.maximum(1.0, np.abs(Z))
    stack = [Z]
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        stack.append(Z + h[:, k : k + 1] * e)
        stack.append(Z - h[:, k : k + 1] * e)
    vals = fun(np.concatenate(stack, axis=0), np.tile(idx, 2 * n + 1)).reshape(2 * n + 1, B, -1)
    J = np.empty((B, vals.shape[2], n))
    for k in range(n):
        J[:, :, k] = (vals[1 + 2 * k] - vals[2 + 2 * k]) / (2 * h[:, k : k + 1])
    return vals[0], J


@dataclass(frozen=True)
class NewtonResult:
    solution: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    iterations: int


def newton_batch(fun, target, z0, tol: float = 1e-9, max_iter: int = 50) -> NewtonResult:
    """Damped Newton for fun(z, idx) = target on a batch, with finite-difference Jacobians."""
    target = np.atleast_2d(np.asarray(target, dtype=float))
    Z = np.atleast_2d(np.asarray(z0, dtype=float)).copy()
    B = Z.shape[0]
    res = np.full(B, np.inf)
    active = np.ones(B, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        vals, J = _fd_jacobian(fun, Z[idx], idx)
        r = target[idx] - vals
        cur = np.linalg.norm(r, axis=1)
        cur = np.where(np.isfinite(cur), cur, np.inf)
        res[idx] = cur
        done = cur < 0.1 * tol
        active[idx[done]] = False
        idx, r, J, cur = idx[~done], r[~done], J[~done], cur[~done]
        if idx.size == 0:
            break
        try:
            dz = np.linalg.solve(J, r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            dz = np.array([np.linalg.lstsq(Jb, rb, rcond=None)[0] for Jb, rb in zip(J, r)])
        alpha = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(12):
            trial = Z[idx[pending]] + alpha[pending, None] * dz[pending]
            tr = np.linalg.norm(target[idx[pending]] - fun(trial, idx[pending]), axis=1)
            better = np.isfinite(tr) & (tr < cur[pending])
            sub = np.nonzero(pending)[0]
            Z[idx[sub[better]]] = trial[better]
            res[idx[sub[better]]] = tr[better]
            pending[sub[better]] = False
            alpha[pending] *= 0.5
            if not np.any(pending):
                break
        stuck = pending
        active[idx[stuck]] = False
    final = np.linalg.norm(target - fun(Z, np.arange(B)), axis=1)
    return NewtonResult(Z, final, final < tol, it)


def exp_inverse(field: HomogeneousField, x, z, guess=None, tol: float = 1e-9, strict: bool = True, steps: int | None = None) -> np.ndarray:
    """xi with exp_x(xi) = z (batched over leading axes of z)."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    flat = z.reshape(-1, z.shape[-1])
    g = flat - x if guess is None else np.asarray(guess, dtype=float).reshape(flat.shape)
    if field.is_flat:
        return (flat - x).reshape(z.shape)

    def fun(xi, _idx):
        return np.nan_to_num(exp_map(field, x, xi, steps), nan=1e100)

    out = newton_batch(fun, flat, g, tol=tol)
    if strict and not np.all(out.converged):
        raise InversionFailure("exponential map inversion did not converge", float(np.max(out.residual)))
    return out.solution.reshape(z.shape)


@dataclass(frozen=True)
class ExponentialChart:
    field: HomogeneousField
    x: np.ndarray
    inj_estimate: float

    def exp(self, xi):
        return exp_map(self.field, self.x, xi)

    def exp_inv(self, z):
        return exp_inverse(self.field, self.x, z)


# ---------------------------------------------------------------------------
# injectivity radius


def sphere_directions(n: int, count: int) -> np.ndarray:
    """Uniform angles in 2-D, a Fibonacci lattice in 3-D."""
    if n == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if n == 3:
        k = np.arange(count) + 0.5
        z = 1 - 2 * k / count
        phi = np.pi * (3 - np.sqrt(5)) * k
        s = np.sqrt(1 - z * z)
        return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    raise ValueError(f"sphere lattice only for n = 2, 3 (got {n})")


@dataclass(frozen=True)
class InjectivityEstimate:
    radius: float
    certified: bool
    levels_tested: tuple = dc_field(default_factory=tuple)

    def __float__(self) -> float:
        return self.radius


def _ball_ok(field: HomogeneousField, x: np.ndarray, d: float, seed: int) -> bool:
    n = x.size
    dirs = sphere_directions(n, 64)
    X = np.broadcast_to(x, dirs.shape)
    if not np.all(flow(field, X, d * dirs, 1.0).ok):
        return False
    radial = np.concatenate([rho * dirs[::4] for rho in (0.25 * d, 0.5 * d, 0.75 * d, d)])

    def fun(xi, _idx):
        return np.nan_to_num(exp_map(field, x, xi), nan=1e100)

    _, J = _fd_jacobian(fun, radial, np.arange(len(radial)))
    if not np.all(np.isfinite(J)) or np.max(np.linalg.cond(J)) >= 1e8:
        return False
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(32, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    xi = u * (d * rng.uniform(0.05, 1.0, size=(32, 1)))
    z = exp_map(field, x, xi)
    if not np.all(np.isfinite(z)):
        return False
    back = newton_batch(fun, z, z - x)
    return bool(np.all(back.converged) and np.max(np.abs(back.solution - xi)) < 1e-8 * max(1.0, d))


def estimate_injectivity_radius(field: HomogeneousField, x, r_cap: float = 1.0, levels: int = 20) -> InjectivityEstimate:
    """Largest dyadic radius (or r_cap itself) on which exp_x is certified by sampling.

    Tests are run on absolute dyadic radii 2^k, so the answer is monotone in r_cap:
    r_cap is returned when the smallest dyadic radius above it passes.
    """
    x = np.asarray(x, dtype=float)
    if r_cap <= 0:
        raise ValueError("r_cap must be positive")
    k = math.ceil(math.log2(r_cap))
    tested = []
    if _ball_ok(field, x, 2.0**k, seed=1000 + k):
        return InjectivityEstimate(float(r_cap), True, ((2.0**k, True),))
    tested.append((2.0**k, False))
    for j in range(k - 1, k - levels, -1):
        d = 2.0**j
        if d >= r_cap:
            continue
        ok = _ball_ok(field, x, d, seed=1000 + j)
        tested.append((d, ok))
        if ok:
            return InjectivityEstimate(d, True, tuple(tested))
    return InjectivityEstimate(2.0 ** (k - levels + 1), False, tuple(tested))


# ---------------------------------------------------------------------------
# boundary value problem


@dataclass(frozen=True)
class GeodesicEdge:
    a: np.ndarray
    b: np.ndarray
    path: GeodesicPath
    travel_time: float
    depart_velocity: np.ndarray
    arrive_velocity: np.ndarray
    endpoint_error: float
    competing_roots: bool = False


def solve_bvp(field: HomogeneousField, a, b, tol: float = 1e-8, store_path: bool = True) -> GeodesicEdge:
    """Unit-speed geodesic from a to b by shooting on the initial velocity.

    The shooting unknowns (unit direction, travel time) are carried as the single
    vector T * xi; the time-1 flow of T * xi equals the time-T flow of xi.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    guess = b - a
    if field.is_flat:
        V = guess
        competing = False
    else:
        def fun(v, _idx):
            return np.nan_to_num(exp_map(field, a, v), nan=1e100)

        starts = [guess]
        rot = 0.1
        if a.size == 2:
            c, s = math.cos(rot), math.sin(rot)
            starts += [np.array([[c, -s], [s, c]]) @ guess, np.array([[c, s], [-s, c]]) @ guess]
        out = newton_batch(fun, np.broadcast_to(b, (len(starts), a.size)), np.array(starts), tol=0.1 * tol)
        if not out.converged[0]:
            raise BVPFailure("geodesic shooting diverged", float(out.residual[0]))
        V = out.solution[0]
        others = out.solution[1:][out.converged[1:]]
        competing = bool(np.any(np.linalg.norm(others - V, axis=1) > 1e-6))
    T = float(np.linalg.norm(V))
    xi = V / T
    if store_path:
        path = integrate(field, a, xi, T)
        end, arrive = path.points[-1], path.velocities[-1]
    else:
        res = flow(field, a[None], xi[None], T)
        end, arrive = res.positions[0], res.velocities[0]
        path = GeodesicPath(np.array([0.0, T]), np.stack([a, end]), np.stack([xi, arrive]), field.name)
    err = float(np.linalg.norm(end - b))
    if err >= tol:
        raise BVPFailure("geodesic endpoint mismatch", err)
    return GeodesicEdge(a, b, path, T, xi, arrive, err, competing)
