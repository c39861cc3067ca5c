"""Directional jump measures, the gauge zeta_p, Caratheodory and Favard estimates, diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .geodesics import sphere_directions
from .projections import ProjectionFamily, project
from .slicing import (DEFAULT_DELTA, DEFAULT_SAMPLES, DEFAULT_WINDOW, GContract, detect_jumps_batch,
                      sample_fibers, sweep)

DEFAULT_DIRECTIONS = {2: 256, 3: 512}
DEFAULT_FIBERS = {2: 256, 3: 64}
TRANSVERSAL_ANGLE = np.deg2rad(10.0)


def sphere_measure(n: int) -> float:
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


def direction_lattice(n: int, count: int | None = None):
    count = count or DEFAULT_DIRECTIONS[n]
    return sphere_directions(n, count), sphere_measure(n) / count


@dataclass
class JumpCloud:
    """Every detected slice jump over a (direction, fiber) lattice."""

    n: int
    directions: np.ndarray
    d_sigma: float
    direction: np.ndarray  # lattice index of each jump
    position: np.ndarray  # point of the fiber at the jump
    size: np.ndarray
    weight: np.ndarray  # fiber quadrature weight
    step: np.ndarray  # spatial length of the sample pair straddling the jump
    grid: dict = dc_field(default_factory=dict)

    @property
    def mass(self) -> np.ndarray:
        """Truncated jump size times fiber weight."""
        return np.minimum(self.size, 1.0) * self.weight

    def eta(self, region=None) -> np.ndarray:
        """eta_xi(B) for every lattice direction; region is an indicator on points or None."""
        sel = np.ones(len(self.size), dtype=bool) if region is None else np.asarray(region(self.position), dtype=bool)
        return np.bincount(self.direction[sel], weights=self.mass[sel], minlength=len(self.directions))


def collect_jumps(u, gc: GContract, family: ProjectionFamily, n_directions: int | None = None,
                  n_fibers: int | None = None, n_samples: int = DEFAULT_SAMPLES,
                  delta: float = DEFAULT_DELTA, w: int = DEFAULT_WINDOW) -> JumpCloud:
    n = family.dim
    dirs, dsig = direction_lattice(n, n_directions)
    n_fibers = n_fibers or DEFAULT_FIBERS[n]
    parts = []
    for D, fb in sweep(u, gc, family, dirs, n_fibers, n_samples):
        jt = detect_jumps_batch(np.where(fb.mask, fb.values, np.nan), fb.t_grid, delta, w)
        a = fb.points[jt.fiber, jt.index - 1]
        b = fb.points[jt.fiber, jt.index]
        parts.append((D[jt.fiber], 0.5 * (a + b), jt.size, fb.weight[jt.fiber], np.linalg.norm(b - a, axis=1)))
    cat = [np.concatenate(p) for p in zip(*parts)]
    grid = {"directions": len(dirs), "fibers": n_fibers, "samples": n_samples, "delta": delta, "window": w}
    return JumpCloud(n, dirs, dsig, cat[0].astype(int), cat[1].reshape(-1, n), cat[2], cat[3], cat[4], grid)


def eta(u, gc: GContract, family: ProjectionFamily, xi, region=None, n_fibers: int | None = None,
        n_samples: int = DEFAULT_SAMPLES, delta: float = DEFAULT_DELTA, w: int = DEFAULT_WINDOW) -> float:
    """eta_xi(B) for a single direction."""
    xi = np.asarray(xi, dtype=float)
    n_fibers = n_fibers or DEFAULT_FIBERS[len(xi)]
    total = 0.0
    for _, fb in sweep(u, gc, family, xi[None], n_fibers, n_samples):
        jt = detect_jumps_batch(np.where(fb.mask, fb.values, np.nan), fb.t_grid, delta, w)
        pos = 0.5 * (fb.points[jt.fiber, jt.index - 1] + fb.points[jt.fiber, jt.index])
        sel = np.ones(len(pos), dtype=bool) if region is None else np.asarray(region(pos), dtype=bool)
        total += float(np.sum(np.minimum(jt.size[sel], 1.0) * fb.weight[jt.fiber[sel]]))
    return total


def lp_over_sphere(values: np.ndarray, d_sigma: float, p: float) -> float:
    values = np.asarray(values, dtype=float)
    if np.isinf(p):
        return float(values.max(initial=0.0))
    return float(np.sum(values**p) * d_sigma) ** (1.0 / p)


def zeta(cloud: JumpCloud, p: float, region=None) -> float:
    """L^p norm over the direction lattice of xi -> eta_xi(B)."""
    return lp_over_sphere(cloud.eta(region), cloud.d_sigma, p)


def zeta_normalized(cloud: JumpCloud, p: float, region=None) -> float:
    """zeta_p with the sphere measure normalized to 1 (power means, monotone in p)."""
    vals = cloud.eta(region)
    if np.isinf(p):
        return float(vals.max(initial=0.0))
    return float(np.mean(vals**p)) ** (1.0 / p)


@dataclass
class Box:
    center: np.ndarray
    half: float

    def contains(self, x) -> np.ndarray:
        return np.all(np.abs(np.atleast_2d(x) - self.center) < self.half, axis=1)


@dataclass
class CaratheodoryEstimate:
    p: float
    depths: list
    depth_values: list
    region: Box

    @property
    def value(self) -> float:
        return self.depth_values[-1]

    def to_dict(self) -> dict:
        return {"measure": "caratheodory", "p": _p_json(self.p), "depths": self.depths,
                "values": self.depth_values,
                "grid": {"center": self.region.center.tolist(), "half_side": self.region.half}}


def _p_json(p):
    return "inf" if np.isinf(p) else p


def caratheodory(cloud: JumpCloud, region: Box, p: float, depths=(3, 4, 5, 6, 7)) -> CaratheodoryEstimate:
    """Sum of zeta_p over the dyadic cubes of side 2^-d (box side) that carry jump mass."""
    sel = region.contains(cloud.position)
    pos = cloud.position[sel]
    mass = cloud.mass[sel]
    dirs = cloud.direction[sel]
    vals = []
    for d in depths:
        k = 2**d
        cell = np.clip(((pos - region.center + region.half) / (2 * region.half) * k).astype(int), 0, k - 1)
        flat = np.ravel_multi_index(tuple(cell.T), (k,) * cloud.n) if len(cell) else np.zeros(0, dtype=int)
        cubes, inv = np.unique(flat, return_inverse=True)
        table = np.zeros((len(cubes), len(cloud.directions)))
        np.add.at(table, (inv, dirs), mass)
        vals.append(float(sum(lp_over_sphere(row, cloud.d_sigma, p) for row in table)))
    return CaratheodoryEstimate(p, list(depths), vals, region)


def tube_representation(cloud: JumpCloud, distance, region: Box, eps=(0.1, 0.05, 0.025, 0.0125)) -> float:
    """inf over eps-tubes B around the known jump set of the integral over directions of eta_xi(B)."""
    best = np.inf
    for e in eps:
        def tube(x, e=e):
            return region.contains(x) & (distance(x) < e)
        best = min(best, float(np.sum(cloud.eta(tube)) * cloud.d_sigma))
    return best


@dataclass
class FavardEstimate:
    value: float
    eps: list
    raw: list
    order: float | None
    grid: dict

    def to_dict(self) -> dict:
        return {"measure": "favard", "p": None, "depths": self.eps, "values": self.raw + [self.value],
                "grid": self.grid | {"observed_order": self.order}}


def favard(cloud_points, family: ProjectionFamily, eps=(0.04, 0.02, 0.01), n_directions: int | None = None,
           n_fibers: int | None = None, n_samples: int = DEFAULT_SAMPLES) -> FavardEstimate:
    """Integral over directions and fibers of crossing counts with the eps-thickened set.

    The thickening adds a term linear in eps, removed by Richardson extrapolation
    between the two smallest thickenings.
    """
    n = family.dim
    dirs, dsig = direction_lattice(n, n_directions)
    n_fibers = n_fibers or DEFAULT_FIBERS[n]
    eps = sorted(eps, reverse=True)
    grid = {"directions": len(dirs), "fibers": n_fibers, "samples": n_samples}
    pts = np.atleast_2d(np.asarray(cloud_points, dtype=float)) if len(cloud_points) else np.zeros((0, n))
    if len(pts) == 0:
        return FavardEstimate(0.0, list(eps), [0.0] * len(eps), None, grid)
    tree = cKDTree(pts)
    lo, hi = pts.min(axis=0) - eps[0], pts.max(axis=0) + eps[0]
    totals = np.zeros(len(eps))
    zero = lambda x: np.zeros((len(x), 1))  # noqa: E731
    gc = GContract("none", lambda x, v: np.zeros((len(x), 1)), 1)
    for _, fb in sweep(zero, gc, family, dirs, n_fibers, n_samples):
        K, N, _ = fb.points.shape
        dist = np.full((K, N), np.inf)
        near = fb.mask & np.all((fb.points >= lo) & (fb.points <= hi), axis=2)
        if np.any(near):
            dist[near] = tree.query(fb.points[near], distance_upper_bound=eps[0])[0]
        for k, e in enumerate(eps):
            hit = dist < e
            runs = np.sum(hit[:, 1:] & ~hit[:, :-1], axis=1) + hit[:, 0]
            totals[k] += float(np.sum(runs * fb.weight))
    totals *= dsig
    value = 2 * totals[-1] - totals[-2]
    order = None
    if len(eps) >= 3:
        a, b = totals[-3] - totals[-2], totals[-2] - totals[-1]
        if a > 0 and b > 0:
            order = float(np.log2(a / b))
    return FavardEstimate(float(value), list(eps), [float(t) for t in totals], order, grid)


def segment_cloud(a, b, spacing: float = 1e-3) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    k = max(2, int(np.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    s = np.linspace(0, 1, k)
    return a + s[:, None] * (b - a)


@dataclass
class ConcentrationReport:
    points: np.ndarray
    direction_fraction: np.ndarray
    mass_fraction_near: float
    mass_total: float

    def to_dict(self) -> dict:
        return {"points": self.points.tolist(), "direction_fraction": self.direction_fraction.tolist(),
                "mass_fraction_near": self.mass_fraction_near, "mass_total": self.mass_total}


def direction_fractions(u, gc: GContract, family: ProjectionFamily, sample_points, n_directions: int | None = None,
                        n_samples: int = DEFAULT_SAMPLES, delta: float = DEFAULT_DELTA,
                        w: int = DEFAULT_WINDOW) -> np.ndarray:
    """For each point, the fraction of lattice directions along which it is a detected slice jump."""
    n = family.dim
    dirs, _ = direction_lattice(n, n_directions)
    out = []
    for x in np.atleast_2d(sample_points):
        fc = project(family, dirs, np.broadcast_to(x, dirs.shape), check_domain=False)
        fb = sample_fibers(u, gc, family, dirs, fc.y, n_samples)
        jt = detect_jumps_batch(np.where(fb.mask, fb.values, np.nan), fb.t_grid, delta, w)
        dt = fb.t_grid[1] - fb.t_grid[0]
        hit = np.zeros(len(dirs), dtype=bool)
        close = np.abs(jt.t_star - fc.t[jt.fiber]) <= 2 * dt
        hit[jt.fiber[close]] = True
        out.append(hit.mean())
    return np.array(out)


def concentration_diagnostic(u, gc: GContract, family: ProjectionFamily, sample_points, cloud: JumpCloud,
                             distance, n_directions: int | None = None) -> ConcentrationReport:
    """Direction fractions at sample points plus the share of eta-mass within two grid steps of the jump set."""
    frac = direction_fractions(u, gc, family, sample_points, n_directions)
    mass = cloud.mass
    total = float(mass.sum())
    near = distance(cloud.position) <= 2 * cloud.step if len(mass) else np.zeros(0, dtype=bool)
    share = float(mass[near].sum() / total) if total > 0 else 1.0
    return ConcentrationReport(np.atleast_2d(sample_points), frac, share, total)


@dataclass
class SlicingReport:
    containment: float | None
    recovery: float | None
    trace_agreement: float | None
    max_atom: float
    n_detected: int
    n_crossings: int
    mass_near: float | None = None  # share of eta-mass within two sample steps of the known set

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def slicing_theorem_check(scn, family: ProjectionFamily, n_directions: int | None = None,
                          n_fibers: int | None = None, n_samples: int = DEFAULT_SAMPLES,
                          delta: float = DEFAULT_DELTA, w: int = DEFAULT_WINDOW) -> SlicingReport:
    """Containment of detected jumps in the known set and recovery of transversal crossings."""
    from .scenarios import crossings

    n = family.dim
    dirs, _ = direction_lattice(n, n_directions)
    n_fibers = n_fibers or DEFAULT_FIBERS[n]
    n_det = n_in = n_cross = n_found = n_trace = 0
    m_total = m_near = 0.0
    per_cell = {}
    for D, fb in sweep(scn.u, scn.gc, family, dirs, n_fibers, n_samples):
        jt = detect_jumps_batch(np.where(fb.mask, fb.values, np.nan), fb.t_grid, delta, w)
        a = fb.points[jt.fiber, jt.index - 1]
        b = fb.points[jt.fiber, jt.index]
        step = np.linalg.norm(b - a, axis=1)
        n_det += len(step)
        near = scn.distance(0.5 * (a + b)) <= 2 * step
        n_in += int(np.sum(near))
        mass = np.minimum(jt.size, 1.0) * fb.weight[jt.fiber]
        m_total += float(mass.sum())
        m_near += float(mass[near].sum())

        k, j = crossings(scn, fb.points, fb.mask)
        N = fb.mask.shape[1]
        # the detector needs w masked samples on both sides of a crossing
        lo, hi = j - w - 2, j + w + 1
        ok = (lo >= 0) & (hi < N)
        k, j, lo, hi = k[ok], j[ok], lo[ok], hi[ok]
        support = np.array([fb.mask[kk, l:h + 1].all() for kk, l, h in zip(k, lo, hi)], dtype=bool)
        k, j = k[support], j[support]
        x = 0.5 * (fb.points[k, j - 1] + fb.points[k, j])
        v = 0.5 * (fb.velocities[k, j - 1] + fb.velocities[k, j])
        nu = scn.normal(x)
        sin_angle = np.abs(np.sum(nu * v, axis=1)) / np.linalg.norm(v, axis=1)
        trans = sin_angle > np.sin(TRANSVERSAL_ANGLE)
        k, j, x, v = k[trans], j[trans], x[trans], v[trans]
        n_cross += len(k)
        for d in D[k]:
            per_cell[int(d)] = per_cell.get(int(d), 0) + 1
        if len(k) == 0:
            continue
        found = np.zeros(len(k), dtype=bool)
        trace_ok = np.zeros(len(k), dtype=bool)
        after = scn.level(fb.points[k, j]) > 0
        up = np.sum(scn.u_plus(x) * scn.gc(x, v), axis=1)
        um = np.sum(scn.u_minus(x) * scn.gc(x, v), axis=1)
        exp_plus = np.where(after, up, um)
        exp_minus = np.where(after, um, up)
        by_fiber = {}
        for q, f in enumerate(jt.fiber):
            by_fiber.setdefault(int(f), []).append(q)
        for c in range(len(k)):
            for q in by_fiber.get(int(k[c]), []):
                if abs(int(jt.index[q]) - int(j[c])) <= 2:
                    found[c] = True
                    trace_ok[c] = (abs(jt.plus[q] - exp_plus[c]) <= 2 * delta
                                   and abs(jt.minus[q] - exp_minus[c]) <= 2 * delta)
                    break
        n_found += int(found.sum())
        n_trace += int(trace_ok.sum())
    counts = np.array(list(per_cell.values())) if per_cell else np.zeros(1)
    return SlicingReport(
        containment=n_in / n_det if n_det else None,
        recovery=n_found / n_cross if n_cross else None,
        trace_agreement=n_trace / n_cross if n_cross else None,
        max_atom=_max_atom(scn, family, dirs, n_fibers, n_samples, delta, w) if n_cross else 0.0,
        n_detected=n_det,
        n_crossings=n_cross,
        mass_near=m_near / m_total if m_total > 0 else None,
    )


def _max_atom(scn, family, dirs, n_fibers, n_samples, delta, w, probe: int = 8) -> float:
    """Largest share of one direction's detected crossings carried by a single fiber cell."""
    worst = 0.0
    pick = dirs[:: max(1, len(dirs) // probe)]
    for D, fb in sweep(scn.u, scn.gc, family, pick, n_fibers, n_samples):
        jt = detect_jumps_batch(np.where(fb.mask, fb.values, np.nan), fb.t_grid, delta, w)
        for d in np.unique(D):
            fibers = jt.fiber[D[jt.fiber] == d]
            if len(fibers) >= 20:
                worst = max(worst, float(np.bincount(fibers).max() / len(fibers)))
    return worst


def estimate_json(measure: str, p, depths, values, grid) -> str:
    return json.dumps({"measure": measure, "p": _p_json(p) if p is not None else None, "depths": list(depths),
                       "values": list(values), "grid": grid}, sort_keys=True)
