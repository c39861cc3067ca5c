"""2-homogeneous fields, their quadratic contractions, rescalings and chart calculus.

Every field evaluates on batches: ``x`` and ``v`` may carry arbitrary leading
axes, the last axis being the coordinate index.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

FieldFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
ChartFn = Callable[[np.ndarray], np.ndarray]

PINV_CUTOFF = 1e-10
RANK_FLOOR = 1e-8
FD_REL_STEP = 1e-4


class DomainError(ValueError):
    """Raised when a field is evaluated outside its declared domain."""

    def __init__(self, point):
        self.point = np.asarray(point, dtype=float)
        super().__init__(f"point outside field domain: {self.point.tolist()}")


class DegenerateChartError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def _always(x: np.ndarray) -> np.ndarray:
    return np.ones(np.shape(x)[:-1], dtype=bool)


@dataclass(frozen=True)
class HomogeneousField:
    """A field F(x, v), 2-homogeneous in v."""

    dim: int
    func: FieldFn
    smoothness_budget: int = 2
    name: str = "custom"
    domain: Callable[[np.ndarray], np.ndarray] = _always
    quadratic: bool = True

    def raw(self, x, v) -> np.ndarray:
        """Evaluate without the domain check (used inside integrators)."""
        return np.asarray(self.func(np.asarray(x, float), np.asarray(v, float)), dtype=float)

    def eval(self, x, v) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.asarray(self.domain(x))
        if not np.all(inside):
            bad = x.reshape(-1, self.dim)[~inside.reshape(-1)][0]
            raise DomainError(bad)
        return self.raw(x, v)

    __call__ = eval

    @property
    def is_flat(self) -> bool:
        return self.name == "euclidean"


@dataclass(frozen=True)
class RescaledField(HomogeneousField):
    """F_{r,x0}(z, v) = r F(x0 + r z, v)."""

    parent: HomogeneousField | None = None
    x0: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    r: float = 1.0


def eval_field(field: HomogeneousField, x, v) -> np.ndarray:
    return field.eval(x, v)


def rescale(field: HomogeneousField, x0, r: float) -> RescaledField:
    """Return F_{r,x0}; nested rescalings collapse onto the original parent."""
    if not r > 0:
        raise ParameterError(f"scale must be positive, got {r}")
    x0 = np.asarray(x0, dtype=float)
    if isinstance(field, RescaledField) and field.parent is not None:
        # s * F_{r,c}(y0 + s z) = F_{rs, c + r y0}(z)
        return rescale(field.parent, field.x0 + field.r * x0, field.r * r)
    parent = field

    def func(z, v):
        return r * parent.raw(x0 + r * np.asarray(z), v)

    def domain(z):
        return parent.domain(x0 + r * np.asarray(z))

    return RescaledField(
        dim=parent.dim,
        func=func,
        smoothness_budget=parent.smoothness_budget,
        name=parent.name,
        domain=domain,
        quadratic=parent.quadratic,
        parent=parent,
        x0=x0,
        r=float(r),
    )


def homogeneity_defect(field: HomogeneousField, x, v, alpha) -> float:
    """Relative error of F(x, alpha v) = alpha^2 F(x, v)."""
    lhs = field.eval(x, alpha * np.asarray(v))
    rhs = alpha**2 * field.eval(x, v)
    scale = max(np.max(np.abs(rhs)), np.max(np.abs(lhs)), 1e-300)
    return float(np.max(np.abs(lhs - rhs)) / scale)


# ---------------------------------------------------------------------------
# quadratic contraction


@dataclass(frozen=True)
class SymMatrix:
    matrix: np.ndarray
    asymmetry: float


@dataclass(frozen=True)
class QuadraticContraction:
    parent: HomogeneousField

    def contract(self, x, v1, v2, v3) -> np.ndarray:
        F = self.parent.eval
        v1, v2, v3 = (np.asarray(a, dtype=float) for a in (v1, v2, v3))
        diff = F(x, v1 + v2) - F(x, v1) - F(x, v2)
        return 0.5 * np.sum(v3 * diff, axis=-1)

    def matrix_form(self, x, v3) -> np.ndarray:
        return fq_matrix(self, x, v3).matrix


def fq_matrix(contraction: QuadraticContraction, x, v3) -> SymMatrix:
    """Matrix M with M v1 . v2 = F^q(x)(v1 (x) v2 (x) v3).

    Entry (i, j) is assembled from the one-sided difference
    F(e_i + e_j) - F(e_i) - F(e_j) on row i only, so a field failing the
    quadratic condition shows up as asymmetry before the explicit
    symmetrization.
    """
    n = contraction.parent.dim
    x = np.asarray(x, dtype=float)
    v3 = np.asarray(v3, dtype=float)
    F = contraction.parent.eval
    eye = np.eye(n)
    raw = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            a, b = eye[i], 0.5 * eye[j]
            # equals contract(e_i, e_j) when F is quadratic in v
            raw[i, j] = float(v3 @ (F(x, a + b) - F(x, a) - F(x, b)))
    asym = float(np.max(np.abs(raw - raw.T))) if n else 0.0
    return SymMatrix(0.5 * (raw + raw.T), asym)


def fq_tensor(field: HomogeneousField, x) -> np.ndarray:
    """Batched polarization T[..., l, i, j] = F_l(x)(e_i, e_j), so a . F(x, v) = v^T (sum_l a_l T_l) v."""
    x = np.asarray(x, dtype=float)
    n = field.dim
    eye = np.eye(n)
    out = np.empty(x.shape[:-1] + (n, n, n))
    Fi = [field.raw(x, np.broadcast_to(eye[i], x.shape)) for i in range(n)]
    for i in range(n):
        out[..., :, i, i] = Fi[i]
        for j in range(i + 1, n):
            both = field.raw(x, np.broadcast_to(eye[i] + eye[j], x.shape))
            out[..., :, i, j] = out[..., :, j, i] = 0.5 * (both - Fi[i] - Fi[j])
    return out


def quadratic_defect(field: HomogeneousField, x, v1, v2) -> float:
    """Residual of F(v1+v2) + F(v1-v2) - 2F(v1) - 2F(v2)."""
    F = field.eval
    v1, v2 = np.asarray(v1, float), np.asarray(v2, float)
    res = F(x, v1 + v2) + F(x, v1 - v2) - 2 * F(x, v1) - 2 * F(x, v2)
    scale = max(np.max(np.abs(F(x, v1))) + np.max(np.abs(F(x, v2))), 1e-300)
    return float(np.max(np.abs(res)) / scale)


# ---------------------------------------------------------------------------
# chart calculus


def _richardson_diff(fun: Callable[[np.ndarray], np.ndarray], h: np.ndarray, step: float) -> np.ndarray:
    """Jacobian d fun / d h (shape m x n) by central differences + one Richardson step."""
    h = np.asarray(h, dtype=float)
    n = h.size
    eye = np.eye(n)
    cols = []
    for i in range(n):
        d1 = (fun(h + step * eye[i]) - fun(h - step * eye[i])) / (2 * step)
        s2 = step / 2
        d2 = (fun(h + s2 * eye[i]) - fun(h - s2 * eye[i])) / (2 * s2)
        cols.append((4 * d2 - d1) / 3)
    return np.stack(cols, axis=-1)


def _local_step(h, fd_step: float | None) -> float:
    if fd_step is not None:
        return float(fd_step)
    return FD_REL_STEP * max(1.0, float(np.max(np.abs(h))))


@dataclass(frozen=True)
class ChartFrame:
    """Frame data of a chart at one coordinate point h."""

    h: np.ndarray
    g: np.ndarray  # m x n, column i is g_i
    g_dual: np.ndarray  # n x m, row k is g^k
    G: np.ndarray  # n x m, G_ij = <g^i, e_j>
    G_inv: np.ndarray  # m x n, right inverse of G
    christoffel: np.ndarray  # [k, i, j] -> Gamma^k_ij

    @property
    def symmetry_residual(self) -> float:
        return float(np.max(np.abs(self.christoffel - self.christoffel.transpose(0, 2, 1))))


def _frame_and_dual(chart: ChartFn, h: np.ndarray, step: float):
    g = np.atleast_2d(_richardson_diff(chart, h, step))
    s = np.linalg.svd(g, compute_uv=False)
    if s.size == 0 or s[-1] < RANK_FLOOR:
        raise DegenerateChartError(f"frame rank deficient at h={np.asarray(h).tolist()}")
    dual = np.linalg.pinv(g, rcond=PINV_CUTOFF)
    return g, dual


def christoffel_from_chart(chart: ChartFn, h, fd_step: float | None = None) -> ChartFrame:
    """Frame, dual frame, G matrices and Gamma^k_ij = -<d_i g^k, g_j> at h."""
    h = np.asarray(h, dtype=float)
    step = _local_step(h, fd_step)
    g, dual = _frame_and_dual(chart, h, step)
    n = h.size
    # outer differences of the dual frame use a coarser step than the inner frame differences
    outer = 10 * step
    inner = step

    def dual_flat(p):
        return _frame_and_dual(chart, p, inner)[1].ravel()

    d_dual = _richardson_diff(dual_flat, h, outer)  # (n*m) x n
    d_dual = d_dual.reshape(dual.shape + (n,))  # [k, a, i] = d_i (g^k)_a
    gamma = -np.einsum("kai,aj->kij", d_dual, g)
    return ChartFrame(h=h, g=g, g_dual=dual, G=dual.copy(), G_inv=g.copy(), christoffel=gamma)


def christoffel_second_derivative(chart: ChartFn, h, fd_step: float | None = None) -> np.ndarray:
    """Gamma^k_ij = <g^k, d_i d_j phi>, an independent route used for cross-checks."""
    h = np.asarray(h, dtype=float)
    step = _local_step(h, fd_step)
    n = h.size
    eye = np.eye(n)
    m = np.asarray(chart(h)).size

    def second(s):
        out = np.empty((m, n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = (
                    chart(h + s * eye[i] + s * eye[j])
                    - chart(h + s * eye[i] - s * eye[j])
                    - chart(h - s * eye[i] + s * eye[j])
                    + chart(h - s * eye[i] - s * eye[j])
                ) / (4 * s * s)
        return out

    s = 10 * step
    hess = (4 * second(s / 2) - second(s)) / 3
    _, dual = _frame_and_dual(chart, h, step)
    return np.einsum("ka,aij->kij", dual, hess)


def christoffel_field(gamma: Callable[[np.ndarray], np.ndarray], dim: int, name: str, domain=_always) -> HomogeneousField:
    """F(x, v) = -(sum_ij Gamma^l_ij v_i v_j)_l for a batched Gamma evaluator."""

    def func(x, v):
        G = gamma(x)  # (..., l, i, j)
        return -np.einsum("...lij,...i,...j->...l", G, v, v)

    return HomogeneousField(dim=dim, func=func, name=name, domain=domain)


def chart_field(chart: ChartFn, dim: int, name: str = "chart", fd_step: float | None = None, domain=_always) -> HomogeneousField:
    """Christoffel field of an arbitrary chart, differentiated numerically per point."""

    def gamma(x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, dim)
        out = np.stack([christoffel_from_chart(chart, p, fd_step).christoffel for p in flat])
        return out.reshape(x.shape[:-1] + (dim, dim, dim))

    return christoffel_field(gamma, dim, name, domain)


def rescaled_chart(chart: ChartFn, x, r: float) -> ChartFn:
    """phi_{r,x}(h) = phi(x + r h)."""
    x = np.asarray(x, dtype=float)
    return lambda h: chart(x + r * np.asarray(h))


# ---------------------------------------------------------------------------
# catalog


def polar_chart(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    rad, th = h[..., 0], h[..., 1]
    return np.stack([rad * np.cos(th), rad * np.sin(th)], axis=-1)


def polar_inverse(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.stack([np.hypot(p[..., 0], p[..., 1]), np.arctan2(p[..., 1], p[..., 0])], axis=-1)


def _polar_gamma(x):
    x = np.asarray(x, dtype=float)
    rad = x[..., 0]
    out = np.zeros(x.shape[:-1] + (2, 2, 2))
    out[..., 0, 1, 1] = -rad
    out[..., 1, 0, 1] = 1.0 / rad
    out[..., 1, 1, 0] = 1.0 / rad
    return out


def _polar_func(x, v):
    rad = x[..., 0]
    vr, vt = v[..., 0], v[..., 1]
    return np.stack([rad * vt * vt, -2.0 * vr * vt / rad], axis=-1)


POLAR_MIN_RADIUS = 1e-3


def _polar_domain(x):
    return np.asarray(x)[..., 0] > POLAR_MIN_RADIUS


def euclidean(dim: int = 2) -> HomogeneousField:
    return HomogeneousField(dim=dim, func=lambda x, v: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v))), name="euclidean")


def polar2d() -> HomogeneousField:
    """Christoffel field of the polar chart, coordinates (radius, angle)."""
    return HomogeneousField(dim=2, func=_polar_func, name="polar2d", domain=_polar_domain)


def conformal2d(k: float) -> HomogeneousField:
    """Metric exp(2 s) delta with s(x) = k |x|^2 / 2.

    Gamma^l_ij = delta_il d_j s + delta_jl d_i s - delta_ij d_l s, hence
    F(x, v) = |v|^2 grad s - 2 (grad s . v) v.
    """

    def func(x, v):
        grad = k * np.asarray(x, dtype=float)
        vv = np.sum(v * v, axis=-1, keepdims=True)
        gv = np.sum(grad * v, axis=-1, keepdims=True)
        return vv * grad - 2.0 * gv * v

    return HomogeneousField(dim=2, func=func, name=f"conformal2d:{k:g}")


@dataclass(frozen=True)
class GridChart:
    """Chart sampled on a tensor grid, interpolated by cubic splines per output coordinate."""

    axes: tuple[np.ndarray, ...]
    values: np.ndarray  # grid shape + (m,)

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def __post_init__(self):
        interps = tuple(
            RegularGridInterpolator(self.axes, self.values[..., k], method="cubic", bounds_error=False, fill_value=None)
            for k in range(self.values.shape[-1])
        )
        object.__setattr__(self, "_interps", interps)

    def __call__(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        pts = h.reshape(-1, self.n)
        out = np.stack([f(pts) for f in self._interps], axis=-1)
        return out.reshape(h.shape[:-1] + (self.m,))

    def inside(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        ok = np.ones(h.shape[:-1], dtype=bool)
        for i, ax in enumerate(self.axes):
            ok &= (h[..., i] >= ax[0]) & (h[..., i] <= ax[-1])
        return ok


def parse_grid_spec(spec: str) -> tuple[np.ndarray, ...]:
    """'lo:hi:count;lo:hi:count' -> per-axis linspace."""
    axes = []
    for part in spec.strip().split(";"):
        lo, hi, cnt = part.split(":")
        axes.append(np.linspace(float(lo), float(hi), int(cnt)))
    return tuple(axes)


def write_chart_file(path, chart: ChartFn, grid_spec: str) -> None:
    axes = parse_grid_spec(grid_spec)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    vals = chart(mesh)
    n, m = len(axes), vals.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "m", "grid_spec"])
        w.writerow([n, m, grid_spec])
        for h, p in zip(mesh.reshape(-1, n), vals.reshape(-1, m)):
            w.writerow([repr(float(a)) for a in h] + [repr(float(b)) for b in p])


def load_chart_file(path) -> GridChart:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["n", "m", "grid_spec"]:
        raise ValueError(f"{path}: expected header 'n,m,grid_spec'")
    n, m, spec = int(rows[1][0]), int(rows[1][1]), rows[1][2]
    axes = parse_grid_spec(spec)
    if len(axes) != n:
        raise ValueError(f"{path}: grid_spec has {len(axes)} axes, header says n={n}")
    data = np.array([[float(c) for c in r] for r in rows[2:]])
    shape = tuple(len(a) for a in axes)
    if data.shape != (int(np.prod(shape)), n + m):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} rows of {n + m} columns")
    return GridChart(axes=axes, values=data[:, n:].reshape(shape + (m,)))


def field_from_name(name: str) -> HomogeneousField:
    """Resolve a catalog id: euclidean[:n], polar2d, conformal2d:<k>, chartfile:<path>."""
    kind, _, arg = name.partition(":")
    if kind == "euclidean":
        return euclidean(int(arg) if arg else 2)
    if kind == "polar2d":
        return polar2d()
    if kind == "conformal2d":
        return conformal2d(float(arg))
    if kind == "chartfile":
        chart = load_chart_file(Path(arg))
        return chart_field(chart, chart.n, name=name, domain=chart.inside)
    raise KeyError(f"unknown field id {name!r}")


def chart_for_field(field: HomogeneousField) -> ChartFn | None:
    """Embedding chart whose Christoffel field is ``field`` (when one is known)."""
    base = field.parent if isinstance(field, RescaledField) and field.parent is not None else field
    if base.name == "polar2d":
        chart = polar_chart
    elif base.name == "euclidean":
        chart = lambda h: np.asarray(h, dtype=float)  # noqa: E731
    else:
        return None
    if isinstance(field, RescaledField) and field.parent is not None:
        return rescaled_chart(chart, field.x0, field.r)
    return chart
