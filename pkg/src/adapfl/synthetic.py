"""Synthetic radar VIL sequences standing in for the proprietary radar archive.

Rain cells are truncated Gaussians that grow, advect with a velocity field
blended from per-quadrant climatologies, and decay. A two-state wet/dry regime
switches rain on and off so that a controllable share of frames is blank.
Each quadrant's births and deaths draw from their own Philox stream, so a
zone's cells do not depend on how the other zones consumed randomness.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import FRAME_STEP
from .frameio import DEFAULT_START
from .grid import VilField

REGIME_STREAM = 0
NOISE_STREAM = 5


@dataclass(frozen=True)
class SyntheticConfig:
    n_frames: int = 2000
    frame_size: int = 100
    n_blobs_mean: float = 3.0
    blob_intensity_range: tuple[float, float] = (1.0, 6.0)
    blob_sigma_range: tuple[float, float] = (2.5, 6.0)
    # one (vx, vy) in px/frame per quadrant, ZONE1..ZONE4
    advection_velocity: tuple = ((1.5, 0.5), (0.5, 1.5), (2.0, -1.0), (-1.0, 1.0))
    zone_intensity_scale: tuple = (1.0, 0.7, 1.3, 0.5)
    zone_birth_scale: tuple = (1.0, 0.6, 0.8, 1.4)
    birth_rate: float = 0.25
    death_rate: float = 0.06
    dry_fraction: float = 0.3
    spell_frames: float = 48.0
    growth_frames: int = 4
    decay_factor: float = 0.7
    texture_noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        for name in ("birth_rate", "death_rate", "dry_fraction"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("blob_intensity_range", "blob_sigma_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be an ordered positive range, got {(lo, hi)}")
        if self.frame_size < 2 or self.frame_size % 2:
            raise ValueError("frame_size must be even and >= 2")
        if self.n_frames < 0:
            raise ValueError("n_frames must be >= 0")
        for name in ("advection_velocity", "zone_intensity_scale", "zone_birth_scale"):
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs one entry per quadrant")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.spell_frames < 1 or self.growth_frames < 1 or self.n_blobs_mean < 0 or self.texture_noise < 0:
            raise ValueError("spell_frames and growth_frames must be >= 1; n_blobs_mean and texture_noise >= 0")


@dataclass
class _Cell:
    x: float
    y: float
    peak: float
    sigma: float
    zone: int
    age: int = 0
    amp: float = 0.0
    decaying: bool = False


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(key,))))


def _velocity(cfg: SyntheticConfig, x: float, y: float) -> tuple[float, float]:
    # bilinear blend between quadrant centres, clamped outside them
    s = cfg.frame_size
    tx = np.clip((x - s / 4) / (s / 2), 0.0, 1.0)
    ty = np.clip((y - s / 4) / (s / 2), 0.0, 1.0)
    v = np.asarray(cfg.advection_velocity, dtype=np.float64)
    top = (1 - tx) * v[0] + tx * v[1]
    bottom = (1 - tx) * v[2] + tx * v[3]
    vx, vy = (1 - ty) * top + ty * bottom
    return float(vx), float(vy)


def _spawn(cfg: SyntheticConfig, rng: np.random.Generator, zone: int) -> _Cell:
    half = cfg.frame_size / 2
    x0 = (zone % 2) * half
    y0 = (zone // 2) * half
    lo, hi = cfg.blob_intensity_range
    peak = rng.uniform(lo, hi) * cfg.zone_intensity_scale[zone]
    sigma = rng.uniform(*cfg.blob_sigma_range)
    return _Cell(x0 + rng.uniform(0, half), y0 + rng.uniform(0, half), peak, sigma, zone)


def _render(cfg: SyntheticConfig, cells) -> np.ndarray:
    s = cfg.frame_size
    out = np.zeros((s, s), dtype=np.float64)
    for c in cells:
        r = 3.0 * c.sigma
        r0, r1 = max(int(np.floor(c.y - r)), 0), min(int(np.ceil(c.y + r)) + 1, s)
        c0, c1 = max(int(np.floor(c.x - r)), 0), min(int(np.ceil(c.x + r)) + 1, s)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        d2 = (xx - c.x) ** 2 + (yy - c.y) ** 2
        blob = c.amp * np.exp(-d2 / (2 * c.sigma ** 2))
        blob[d2 > r * r] = 0.0
        out[r0:r1, c0:c1] += blob
    return out


def generate_synthetic_sequence(config: SyntheticConfig | None = None) -> list[VilField]:
    cfg = config or SyntheticConfig()
    regime_rng = _stream(cfg.seed, REGIME_STREAM)
    zone_rngs = [_stream(cfg.seed, 1 + z) for z in range(4)]
    noise_rng = _stream(cfg.seed, NOISE_STREAM)

    f = cfg.dry_fraction
    cycle = 2.0 * cfg.spell_frames
    p_to_wet = 0.0 if f == 1.0 else (1.0 if f == 0.0 else min(1.0, 1.0 / (cycle * f)))
    p_to_dry = 0.0 if f == 0.0 else (1.0 if f == 1.0 else min(1.0, 1.0 / (cycle * (1 - f))))
    wet = regime_rng.random() >= f
    max_cells = max(4, int(np.ceil(6 * cfg.n_blobs_mean)))
    margin = 3 * cfg.blob_sigma_range[1]

    cells: list[_Cell] = []
    frames = []
    for i in range(cfg.n_frames):
        u = regime_rng.random()
        if wet and u < p_to_dry:
            wet = False
        elif not wet and u < p_to_wet:
            wet = True
            # a wet spell opens with a burst of cells spread over the quadrants
            for _ in range(regime_rng.poisson(cfg.n_blobs_mean)):
                z = int(regime_rng.integers(4))
                cells.append(_spawn(cfg, zone_rngs[z], z))

        if wet:
            for z in range(4):
                p = min(1.0, cfg.birth_rate * cfg.zone_birth_scale[z])
                if zone_rngs[z].random() < p and len(cells) < max_cells:
                    cells.append(_spawn(cfg, zone_rngs[z], z))

        alive = []
        for c in cells:
            if not c.decaying and (not wet or zone_rngs[c.zone].random() < cfg.death_rate):
                c.decaying = True
            if c.decaying:
                c.amp *= cfg.decay_factor
            else:
                c.amp = c.peak * min(1.0, (c.age + 1) / cfg.growth_frames)
            vx, vy = _velocity(cfg, c.x, c.y)
            c.x += vx
            c.y += vy
            c.age += 1
            outside = not (-margin < c.x < cfg.frame_size + margin and -margin < c.y < cfg.frame_size + margin)
            if not outside and not (c.decaying and c.amp < 0.05 * c.peak):
                alive.append(c)
        cells = alive

        values = _render(cfg, cells)
        if cfg.texture_noise > 0:
            values *= 1.0 + cfg.texture_noise * noise_rng.standard_normal(values.shape)
        np.maximum(values, 0.0, out=values)
        frames.append(VilField(values.astype(np.float32), 1.0, DEFAULT_START + i * FRAME_STEP))
    return frames
