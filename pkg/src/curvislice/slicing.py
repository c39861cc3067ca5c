"""One-dimensional slices along projection fibers, jump detection and slice variation."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.interpolate import RegularGridInterpolator

from .geodesics import rk4_samples
from .projections import ProjectionFamily, project, tangent_basis

DEFAULT_DELTA = 0.05
DEFAULT_WINDOW = 5
DEFAULT_SAMPLES = 512
FIBER_REACH = 1.1


@dataclass(frozen=True)
class GContract:
    """A continuous map g(x, v) into R^m that pairs u with the fiber velocity."""

    name: str
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    m: int

    def __call__(self, x, v) -> np.ndarray:
        return self.func(np.atleast_2d(x), np.atleast_2d(v))

    def span_projector(self, x, n_probe: int = 64, seed: int = 0) -> np.ndarray:
        """Orthogonal projector of R^m onto span g(x, R^n), from random probes."""
        x = np.asarray(x, dtype=float)
        rng = np.random.default_rng(seed)
        V = rng.standard_normal((n_probe, x.shape[-1]))
        G = self(np.broadcast_to(x, V.shape), V)
        U, s, _ = np.linalg.svd(G.T, full_matrices=False)
        k = int(np.sum(s > 1e-8 * max(s[0], 1e-300)))
        return U[:, :k] @ U[:, :k].T

    def rank(self, x) -> int:
        return int(round(np.trace(self.span_projector(x))))


def identity_contract(n: int) -> GContract:
    return GContract("identity", lambda x, v: v.copy(), n)


def constant_contract(e) -> GContract:
    e = np.asarray(e, dtype=float)
    return GContract("constant", lambda x, v: np.broadcast_to(e, (len(v), len(e))).copy(), len(e))


def linear_contract(M) -> GContract:
    M = np.asarray(M, dtype=float)
    return GContract("linear", lambda x, v: v @ M.T, M.shape[0])


def u_frak(u, gc: GContract, x) -> np.ndarray:
    """Projection of u(x) onto the span of g(x, .)."""
    x = np.asarray(x, dtype=float)
    return gc.span_projector(x) @ np.asarray(u(x[None]))[0]


@dataclass(frozen=True)
class TruncationMap:
    """Smooth increasing bijection R -> (-1, 1)."""

    scale: float = 1.0

    def __call__(self, s):
        return (2 / np.pi) * np.arctan(np.asarray(s) / self.scale)


@dataclass
class Slice1D:
    xi: np.ndarray
    y: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray
    domain_mask: np.ndarray
    points: np.ndarray | None = None
    velocities: np.ndarray | None = None

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mask", "value_1"])
            for t, m, v in zip(self.t_grid, self.domain_mask, self.values):
                w.writerow([repr(float(t)), int(m), repr(float(v))])


@dataclass
class FiberBatch:
    """Many fibers sampled on one shared time grid."""

    xi: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    t_grid: np.ndarray
    points: np.ndarray
    velocities: np.ndarray
    mask: np.ndarray
    values: np.ndarray

    def slice(self, k: int) -> Slice1D:
        return Slice1D(self.xi[k], self.y[k], self.t_grid, self.values[k], self.mask[k],
                       self.points[k], self.velocities[k])


def fiber_grid(family: ProjectionFamily, xi, n_fibers: int):
    """Base points y on xi^perp inside the ball and their quadrature weights."""
    xi = np.asarray(xi, dtype=float)
    n = len(xi)
    E = tangent_basis(xi)[0]
    R = family.R0
    if n == 2:
        s = (np.arange(n_fibers) + 0.5) / n_fibers * 2 * R - R
        return s[:, None] * E[:, 0], np.full(n_fibers, 2 * R / n_fibers)
    s = (np.arange(n_fibers) + 0.5) / n_fibers * 2 * R - R
    a, b = np.meshgrid(s, s, indexing="ij")
    coef = np.stack([a.ravel(), b.ravel()], axis=1)
    keep = np.linalg.norm(coef, axis=1) < R
    coef = coef[keep]
    return coef @ E.T, np.full(len(coef), (2 * R / n_fibers) ** 2)


def slice_time_grid(family: ProjectionFamily, n_samples: int = DEFAULT_SAMPLES) -> np.ndarray:
    T = FIBER_REACH * family.R0
    return np.linspace(-T, T, n_samples)


def sample_fibers(u, gc: GContract, family: ProjectionFamily, XI, Y, n_samples: int = DEFAULT_SAMPLES,
                  weight=None) -> FiberBatch:
    XI = np.atleast_2d(np.asarray(XI, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    K, n = Y.shape
    XI = np.broadcast_to(XI, (K, n))
    t_grid = slice_time_grid(family, n_samples)
    P, W, ok = rk4_samples(family.field, family.x0 + Y, XI, t_grid)
    inside = np.linalg.norm(np.nan_to_num(P) - family.x0, axis=2) <= family.R0
    mask = ok & inside
    vals = np.full((K, n_samples), np.nan)
    if np.any(mask):
        p, w = P[mask], W[mask]
        vals[mask] = np.sum(u(p) * gc(p, w), axis=1)
    wt = np.ones(K) if weight is None else np.broadcast_to(np.asarray(weight, dtype=float), (K,))
    return FiberBatch(np.array(XI), Y, wt, t_grid, P, W, mask, vals)


def slice(u, gc: GContract, family: ProjectionFamily, xi, y, n_samples: int = DEFAULT_SAMPLES) -> Slice1D:
    """The slice t -> u(phi_xi(y + t xi)) . g(phi_xi, d/dt phi_xi) on a uniform grid."""
    return sample_fibers(u, gc, family, xi, y, n_samples).slice(0)


def sweep(u, gc: GContract, family: ProjectionFamily, directions, n_fibers: int,
          n_samples: int = DEFAULT_SAMPLES, chunk: int = 8192):
    """Yield (direction indices, FiberBatch) over the direction lattice, in deterministic order."""
    rows_xi, rows_y, rows_w, rows_d = [], [], [], []
    for d, xi in enumerate(np.atleast_2d(directions)):
        Y, w = fiber_grid(family, xi, n_fibers)
        rows_xi.append(np.broadcast_to(xi, Y.shape))
        rows_y.append(Y)
        rows_w.append(w)
        rows_d.append(np.full(len(Y), d))
    XI = np.concatenate(rows_xi)
    Y = np.concatenate(rows_y)
    W = np.concatenate(rows_w)
    D = np.concatenate(rows_d)
    for start in range(0, len(Y), chunk):
        sl = np.s_[start:start + chunk]
        yield D[sl], sample_fibers(u, gc, family, XI[sl], Y[sl], n_samples, W[sl])


@dataclass(frozen=True)
class JumpRecord:
    t_star: float
    trace_minus: float
    trace_plus: float
    jump_size: float
    exceeds_one: bool
    index: int


@dataclass
class JumpTable:
    """Detected jumps for a batch of slices; index is the right sample of the jump pair."""

    fiber: np.ndarray
    index: np.ndarray
    t_star: np.ndarray
    minus: np.ndarray
    plus: np.ndarray

    @property
    def size(self) -> np.ndarray:
        return np.abs(self.plus - self.minus)

    def records(self, k: int) -> list[JumpRecord]:
        sel = np.nonzero(self.fiber == k)[0]
        return [JumpRecord(float(self.t_star[j]), float(self.minus[j]), float(self.plus[j]),
                           float(abs(self.plus[j] - self.minus[j])), bool(abs(self.plus[j] - self.minus[j]) > 1),
                           int(self.index[j])) for j in sel]


def detect_jumps_batch(values, t_grid, delta: float = DEFAULT_DELTA, w: int = DEFAULT_WINDOW) -> JumpTable:
    values = np.atleast_2d(values)
    K, N = values.shape
    empty = JumpTable(*(np.zeros(0, dtype=int),) * 2, *(np.zeros(0),) * 3)
    if N < 4 * w:
        return empty
    win = sliding_window_view(values, w, axis=1)  # window j covers samples j .. j+w-1
    med = np.median(win, axis=2)
    mad = np.median(np.abs(win - med[..., None]), axis=2)
    # candidate i separates samples i-1 and i: left window starts at i-w, right at i
    i = np.arange(w, N - w + 1)
    mL, mR = med[:, i - w], med[:, i]
    gap = np.abs(mR - mL)
    with np.errstate(invalid="ignore"):
        cand = (gap >= delta) & (mad[:, i - w] < delta / 4) & (mad[:, i] < delta / 4)
    if not np.any(cand):
        return empty
    step = np.abs(values[:, i] - values[:, i - 1])
    out = []
    rows, cols = np.nonzero(cand)
    # split into runs of consecutive candidates within each row
    brk = np.nonzero((np.diff(rows) != 0) | (np.diff(cols) != 1))[0] + 1
    for run_r, run_c in zip(np.split(rows, brk), np.split(cols, brk)):
        k = run_r[0]
        g = gap[k, run_c]
        best = run_c[g >= g.max() - 1e-12]
        c = best[np.argmax(step[k, best])]
        out.append((k, i[c], mL[k, c], mR[k, c]))
    arr = np.array(out, dtype=float)
    idx = arr[:, 1].astype(int)
    return JumpTable(arr[:, 0].astype(int), idx, 0.5 * (t_grid[idx - 1] + t_grid[idx]), arr[:, 2], arr[:, 3])


def detect_jumps(s: Slice1D, delta: float = DEFAULT_DELTA, w: int = DEFAULT_WINDOW) -> list[JumpRecord]:
    vals = np.where(s.domain_mask, s.values, np.nan)
    return detect_jumps_batch(vals[None], s.t_grid, delta, w).records(0)


def slice_variation(s: Slice1D, B_mask=None, delta: float = DEFAULT_DELTA, w: int = DEFAULT_WINDOW):
    """(pointwise variation with jumps of size > 1 removed, number of such jumps)."""
    m = s.domain_mask if B_mask is None else s.domain_mask & np.asarray(B_mask, dtype=bool)
    v = s.values
    pair = m[1:] & m[:-1]
    d = np.abs(np.diff(np.where(m, v, 0.0)))
    total = float(np.sum(d[pair]))
    count = 0
    for j in detect_jumps(s, delta, w):
        if j.exceeds_one and pair[j.index - 1]:
            total -= float(d[j.index - 1])
            count += 1
    return max(total, 0.0), count


def truncated_slice_bv_check(u, gc: GContract, family: ProjectionFamily, xi, tau=None, n_fibers: int = 256,
                             n_samples: int = DEFAULT_SAMPLES) -> float:
    """Quadrature over fibers of the pointwise variation of tau(slice)."""
    tau = tau or TruncationMap()
    Y, wts = fiber_grid(family, xi, n_fibers)
    fb = sample_fibers(u, gc, family, xi, Y, n_samples, wts)
    v = np.where(fb.mask, tau(np.nan_to_num(fb.values)), 0.0)
    pair = fb.mask[:, 1:] & fb.mask[:, :-1]
    var = np.sum(np.where(pair, np.abs(np.diff(v, axis=1)), 0.0), axis=1)
    return float(np.sum(var * fb.weight))


def fiber_coordinates_identity(u, gc: GContract, family: ProjectionFamily, s: Slice1D) -> float:
    """max |u_xi(phi_xi(y + t xi)) - slice(t)| over the masked samples."""
    m = s.domain_mask
    pts = s.points[m]
    fc = project(family, s.xi, pts, check_domain=False)
    direct = np.sum(u(pts) * gc(pts, fc.xi_phi), axis=1)
    return float(np.abs(direct - s.values[m]).max()) if len(pts) else 0.0


def write_voxel_file(path, values: np.ndarray, origin, spacing) -> None:
    """values has shape dims + (m,)."""
    values = np.asarray(values, dtype="<f8")
    n = values.ndim - 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", n, values.shape[-1]))
        fh.write(struct.pack(f"<{n}q", *values.shape[:-1]))
        fh.write(struct.pack(f"<{n}d", *origin))
        fh.write(struct.pack(f"<{n}d", *spacing))
        fh.write(values.tobytes(order="C"))


@dataclass
class VoxelFunction:
    """Multilinear interpolation of a sampled vector function on a regular grid."""

    origin: np.ndarray
    spacing: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        axes = tuple(o + s * np.arange(k) for o, s, k in zip(self.origin, self.spacing, self.samples.shape[:-1]))
        self._interp = RegularGridInterpolator(axes, self.samples, method="linear", bounds_error=False,
                                               fill_value=None)

    def __call__(self, x) -> np.ndarray:
        return self._interp(np.atleast_2d(x))


def load_voxel_file(path) -> VoxelFunction:
    raw = open(path, "rb").read()
    n, m = struct.unpack_from("<qq", raw, 0)
    off = 16
    dims = struct.unpack_from(f"<{n}q", raw, off)
    off += 8 * n
    origin = np.array(struct.unpack_from(f"<{n}d", raw, off))
    off += 8 * n
    spacing = np.array(struct.unpack_from(f"<{n}d", raw, off))
    off += 8 * n
    data = np.frombuffer(raw, dtype="<f8", offset=off)
    expected = int(np.prod(dims)) * m
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} samples, found {data.size}")
    return VoxelFunction(origin, spacing, data.reshape(*dims, m).astype(float))
