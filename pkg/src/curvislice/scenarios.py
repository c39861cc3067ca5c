"""Synthetic functions with known jump sets, traces and jump measures."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .field_core import HomogeneousField, euclidean, polar2d, polar_chart, polar_inverse
from .projections import ProjectionFamily, make_family
from .slicing import GContract, constant_contract, identity_contract

POLAR_BASE = np.array([2.0, 0.0])
POLAR_RADIUS = 0.5
CURVE_SAMPLES = 20000


def polar_frame(h) -> np.ndarray:
    """Columns d phi / d h_j of the polar chart, shape (..., 2, 2)."""
    h = np.asarray(h, dtype=float)
    r, t = h[..., 0], h[..., 1]
    c, s = np.cos(t), np.sin(t)
    return np.stack([np.stack([c, -r * s], -1), np.stack([s, r * c], -1)], -2)


def pullback(V: Callable[[np.ndarray], np.ndarray]):
    """u_j(h) = <V(phi(h)), d_j phi(h)> for an embedded vector field V."""

    def u(h):
        h = np.atleast_2d(h)
        return np.einsum("bi,bij->bj", V(polar_chart(h)), polar_frame(h))

    return u


def rigid(omega: float, center, b) -> Callable[[np.ndarray], np.ndarray]:
    """p -> omega R90 (p - center) + b, an infinitesimal rigid motion of the plane."""
    center = np.asarray(center, dtype=float)
    b = np.asarray(b, dtype=float)

    def V(p):
        q = np.atleast_2d(p) - center
        return omega * np.stack([-q[:, 1], q[:, 0]], axis=1) + b

    return V


@dataclass
class Scenario:
    """u with a jump across the zero set of ``level``; u_plus lives where level > 0."""

    name: str
    field: HomogeneousField
    x0: np.ndarray
    R0: float
    gc: GContract
    level: Callable[[np.ndarray], np.ndarray]
    u_plus: Callable[[np.ndarray], np.ndarray]
    u_minus: Callable[[np.ndarray], np.ndarray]
    curve: np.ndarray  # dense samples of the jump set in the working coordinates
    piecewise_rigid: bool = False

    def __post_init__(self):
        self._tree = cKDTree(self.curve)
        seg = np.linalg.norm(np.diff(self.curve, axis=0), axis=1)
        self._seg_mid = 0.5 * (self.curve[1:] + self.curve[:-1])
        self._seg_len = np.where(seg < 10 * np.median(seg), seg, 0.0)

    @property
    def dim(self) -> int:
        return self.field.dim

    def family(self) -> ProjectionFamily:
        return make_family(self.field, self.x0, self.R0)

    def u(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        side = (self.level(x) > 0)[:, None]
        return np.where(side, self.u_plus(x), self.u_minus(x))

    def distance(self, x) -> np.ndarray:
        return self._tree.query(np.atleast_2d(x))[0]

    def normal(self, x, step: float = 1e-6) -> np.ndarray:
        x = np.atleast_2d(x)
        g = np.stack([(self.level(x + step * e) - self.level(x - step * e)) / (2 * step) for e in np.eye(self.dim)], 1)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def jump_measure_ball(self, x, r: float) -> float:
        """lambda(B_r(x)) for lambda the length measure on the jump set."""
        inside = np.linalg.norm(self._seg_mid - np.asarray(x), axis=1) < r
        return float(np.sum(self._seg_len[inside]))


def _line_curve(p, d, half: float = 3.0) -> np.ndarray:
    s = np.linspace(-half, half, CURVE_SAMPLES)
    return np.asarray(p) + s[:, None] * np.asarray(d)


def halfplane() -> Scenario:
    """u = e2 on {x2 > 0}, 0 below; g(x, v) = v."""
    return Scenario(
        "halfplane", euclidean(2), np.zeros(2), 1.0, identity_contract(2),
        level=lambda x: np.atleast_2d(x)[:, 1],
        u_plus=lambda x: np.broadcast_to([0.0, 1.0], np.atleast_2d(x).shape).copy(),
        u_minus=lambda x: np.zeros_like(np.atleast_2d(x), dtype=float),
        curve=_line_curve([0, 0], [1, 0]), piecewise_rigid=True,
    )


def circle(radius: float = 0.6) -> Scenario:
    """Indicator of a disc paired with a constant g."""
    s = np.linspace(0, 2 * np.pi, CURVE_SAMPLES)
    return Scenario(
        "circle", euclidean(2), np.zeros(2), 1.0, constant_contract([1.0, 0.0]),
        level=lambda x: radius - np.linalg.norm(np.atleast_2d(x), axis=1),
        u_plus=lambda x: np.broadcast_to([1.0, 0.0], np.atleast_2d(x).shape).copy(),
        u_minus=lambda x: np.zeros_like(np.atleast_2d(x), dtype=float),
        curve=radius * np.stack([np.cos(s), np.sin(s)], 1),
    )


def polar_line(theta0: float = 0.1) -> Scenario:
    """Piecewise rigid field across the ray theta = theta0, pulled back to polar coordinates.

    The two sides differ by the constant unit normal of the ray, so every slice
    jumps by the normal component of the embedded fiber velocity.
    """
    nrm = np.array([-np.sin(theta0), np.cos(theta0)])
    base = rigid(0.5, polar_chart(POLAR_BASE), [0.2, -0.1])
    s = np.linspace(0.5, 3.5, CURVE_SAMPLES)
    return Scenario(
        "polar_line", polar2d(), POLAR_BASE.copy(), POLAR_RADIUS, identity_contract(2),
        level=lambda h: np.atleast_2d(h)[:, 1] - theta0,
        u_plus=pullback(lambda p: base(p) + nrm),
        u_minus=pullback(base),
        curve=np.stack([s, np.full_like(s, theta0)], 1), piecewise_rigid=True,
    )


def geodesic_circle(radius: float = 0.4, center=POLAR_BASE) -> Scenario:
    """Indicator of a geodesic ball of the polar metric, paired with a constant g."""
    c = polar_chart(np.asarray(center, dtype=float))
    s = np.linspace(0, 2 * np.pi, CURVE_SAMPLES)
    curve = polar_inverse(c + radius * np.stack([np.cos(s), np.sin(s)], 1))
    return Scenario(
        "geodesic_circle", polar2d(), POLAR_BASE.copy(), POLAR_RADIUS, constant_contract([1.0, 0.0]),
        level=lambda h: radius - np.linalg.norm(polar_chart(np.atleast_2d(h)) - c, axis=1),
        u_plus=lambda x: np.broadcast_to([1.0, 0.0], np.atleast_2d(x).shape).copy(),
        u_minus=lambda x: np.zeros_like(np.atleast_2d(x), dtype=float),
        curve=curve,
    )


CATALOG = {
    "halfplane": halfplane,
    "circle": circle,
    "polar_line": polar_line,
    "geodesic_circle": geodesic_circle,
}


def get_scenario(name: str) -> Scenario:
    try:
        return CATALOG[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; known: {sorted(CATALOG)}") from None


def crossings(scn: Scenario, points: np.ndarray, mask: np.ndarray):
    """Sign changes of the level function between consecutive masked samples.

    Returns (fiber index, right sample index) pairs.
    """
    K, N, n = points.shape
    lev = np.full((K, N), np.nan)
    lev[mask] = scn.level(points[mask])
    with np.errstate(invalid="ignore"):
        change = (np.sign(lev[:, 1:]) != np.sign(lev[:, :-1])) & mask[:, 1:] & mask[:, :-1]
    k, j = np.nonzero(change)
    return k, j + 1
