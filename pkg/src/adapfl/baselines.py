"""Correlation tracking (TREC), continuity smoothing (COTREC) and semi-Lagrangian advection.

Motion vectors are in pixels per 5-minute step; ``u`` points right (+column)
and ``v`` points down (+row).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import DimensionError, VilField

FLAT_BLOCK_STD = 1e-6
_TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MotionField:
    u: np.ndarray
    v: np.ndarray
    block_size: int
    search_radius: int
    shape: tuple[int, int]  # pixel shape of the tracked fields

    def __post_init__(self):
        u, v = np.asarray(self.u, dtype=np.float64), np.asarray(self.v, dtype=np.float64)
        grid = block_grid_shape(self.shape, self.block_size)
        if u.shape != grid or v.shape != grid:
            raise DimensionError(f"motion grid must be {grid}, got {u.shape} and {v.shape}")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    def mean(self) -> tuple[float, float]:
        return float(self.u.mean()), float(self.v.mean())

    def with_vectors(self, u, v) -> "MotionField":
        return MotionField(u, v, self.block_size, self.search_radius, self.shape)


@dataclass(frozen=True)
class CotrecParams:
    block_size: int = 10
    search_radius: int = 5
    iterations: int = 50
    relaxation_weight: float = 1.0


def block_grid_shape(shape, block_size: int) -> tuple[int, int]:
    h, w = shape
    return math.ceil(h / block_size), math.ceil(w / block_size)


def _candidates(radius: int):
    # search order doubles as the tie-break: smaller |d| first, then u, then v
    offs = [(u, v) for u in range(-radius, radius + 1) for v in range(-radius, radius + 1)]
    return sorted(offs, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))


def trec_motion(prev: VilField, curr: VilField, block_size: int = 10, search_radius: int = 5) -> MotionField:
    """Per-block integer displacement maximizing Pearson correlation between frames.

    For each block of ``curr`` the displacement (u, v) is the one for which the block
    best matches ``prev`` at the block position minus (u, v). Pixels outside ``prev``
    count as zero. Blocks whose standard deviation is below 1e-6 get the zero vector.
    """
    if prev.shape != curr.shape:
        raise DimensionError(f"frames differ in shape: {prev.shape} vs {curr.shape}")
    if block_size < 2 or search_radius < 1:
        raise ValueError("block_size must be >= 2 and search_radius >= 1")
    h, w = curr.shape
    R = search_radius
    a = curr.values.astype(np.float64)
    padded = np.pad(prev.values.astype(np.float64), R)
    gh, gw = block_grid_shape(curr.shape, block_size)
    u = np.zeros((gh, gw))
    v = np.zeros((gh, gw))
    order = _candidates(R)
    for bi in range(gh):
        for bj in range(gw):
            r0, c0 = bi * block_size, bj * block_size
            r1, c1 = min(r0 + block_size, h), min(c0 + block_size, w)
            block = a[r0:r1, c0:c1]
            if block.std() < FLAT_BLOCK_STD:
                continue
            bh, bw = block.shape
            # window (i, j) of the padded search area starts at prev row r0 - R + i, i.e. v = R - i
            area = padded[r0:r1 + 2 * R, c0:c1 + 2 * R]
            wins = sliding_window_view(area, (bh, bw)).reshape(2 * R + 1, 2 * R + 1, -1)
            da = (block - block.mean()).ravel()
            dw = wins - wins.mean(axis=-1, keepdims=True)
            num = dw @ da
            den = np.sqrt((dw * dw).sum(axis=-1) * (da @ da))
            with np.errstate(invalid="ignore", divide="ignore"):
                corr = np.where(den > 0, num / den, -np.inf)
            best, best_d = -np.inf, (0, 0)
            for du, dv in order:
                c = corr[R - dv, R - du]
                if c > best + _TIE_TOL:
                    best, best_d = c, (du, dv)
            u[bi, bj], v[bi, bj] = best_d
    return MotionField(u, v, block_size, search_radius, curr.shape)


def divergence(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Forward-difference divergence on the (gh - 1) x (gw - 1) interior cells."""
    return (u[:-1, 1:] - u[:-1, :-1]) + (v[1:, :-1] - v[:-1, :-1])


def _divergence_adjoint(d: np.ndarray, shape):
    gu = np.zeros(shape)
    gv = np.zeros(shape)
    gu[:-1, 1:] += d
    gu[:-1, :-1] -= d
    gv[1:, :-1] += d
    gv[:-1, :-1] -= d
    return gu, gv


def divergence_energy(motion: MotionField) -> float:
    d = divergence(motion.u, motion.v)
    return float((d * d).sum())


def cotrec_smooth(motion: MotionField, iterations: int = 50, relaxation_weight: float = 1.0) -> MotionField:
    """Relax the raw vectors toward a low-divergence field.

    Minimizes ``sum |w - w_raw|^2 + lam * sum div(w)^2`` by a fixed number of
    uniformly damped relaxation sweeps. The step 1 / (1 + 8 lam) bounds the
    operator norm, so the energy never increases; since the divergence of a
    constant field is zero, the mean vector is an invariant of the iteration.
    """
    if iterations < 0 or relaxation_weight < 0:
        raise ValueError("iterations and relaxation_weight must be non-negative")
    lam = float(relaxation_weight)
    u0, v0 = motion.u, motion.v
    u, v = u0.copy(), v0.copy()
    if lam == 0 or min(u.shape) < 2:
        return motion.with_vectors(u, v)
    step = 1.0 / (1.0 + 8.0 * lam)
    for _ in range(iterations):
        gu, gv = _divergence_adjoint(divergence(u, v), u.shape)
        u = u - step * ((u - u0) + lam * gu)
        v = v - step * ((v - v0) + lam * gv)
    # remove floating-point drift of the invariant mean
    u += u0.mean() - u.mean()
    v += v0.mean() - v.mean()
    return motion.with_vectors(u, v)


def _block_centres(n_pixels: int, block_size: int) -> np.ndarray:
    starts = np.arange(0, n_pixels, block_size)
    ends = np.minimum(starts + block_size, n_pixels)
    return (starts + ends - 1) / 2.0


def _upsample(grid: np.ndarray, shape, block_size: int) -> np.ndarray:
    # separable linear interpolation from block centres, clamped at the ends;
    # np.interp's slope form reproduces a constant grid exactly
    h, w = shape
    cy, cx = _block_centres(h, block_size), _block_centres(w, block_size)
    px, py = np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64)
    rows = np.stack([np.interp(px, cx, r) for r in grid])
    return np.stack([np.interp(py, cy, c) for c in rows.T], axis=1)


def pixel_motion(motion: MotionField) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear upsampling of the block vectors to one vector per pixel."""
    return (_upsample(motion.u, motion.shape, motion.block_size),
            _upsample(motion.v, motion.shape, motion.block_size))


def _bilinear(values: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = values.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros(ys.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            sample = np.where(inside, values[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
            out += wy * wx * sample
    return out


def advect(field: VilField, motion: MotionField, steps: int = 1) -> VilField:
    """Backward semi-Lagrangian transport: each pixel takes the value found upstream.

    Departure points outside the grid contribute zero.
    """
    if motion.shape != field.shape:
        raise DimensionError(f"motion field covers {motion.shape}, field is {field.shape}")
    pu, pv = pixel_motion(motion)
    yy, xx = np.mgrid[0:field.height, 0:field.width].astype(np.float64)
    values = field.values.astype(np.float64)
    for _ in range(steps):
        values = _bilinear(values, yy - pv, xx - pu)
    return field._derive(np.maximum(values, 0.0).astype(np.float32))


def cotrec_predict(prev: VilField, curr: VilField, params: CotrecParams = CotrecParams()) -> VilField:
    """Five-minute nowcast: track prev -> curr, smooth the vectors, advect ``curr``."""
    raw = trec_motion(prev, curr, params.block_size, params.search_radius)
    smooth = cotrec_smooth(raw, params.iterations, params.relaxation_weight)
    return advect(curr, smooth)
