"""Windowing, blank filtering, temporal splits and per-zone client datasets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .grid import QUADRANTS, DimensionError, VilField, ZoneId, crop_center, split_quadrants

FRAME_STEP = timedelta(minutes=5)
FULL_FRAME = 100
ZONE_SIZE = 50


@dataclass(frozen=True)
class Sample:
    inputs: tuple[VilField, VilField, VilField]
    target: VilField
    timestamp: datetime | None = None

    def __post_init__(self):
        shapes = {f.shape for f in self.inputs} | {self.target.shape}
        if len(shapes) != 1:
            raise DimensionError(f"sample fields disagree in shape: {sorted(shapes)}")


@dataclass
class ClientDataset:
    zone: ZoneId
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def __post_init__(self):
        train_times = [s.timestamp for s in self.train if s.timestamp is not None]
        test_times = [s.timestamp for s in self.test if s.timestamp is not None]
        if train_times and test_times and max(train_times) >= min(test_times):
            raise ValueError(f"{self.zone.value}: train samples must precede test samples")


def _check_spacing(frames) -> None:
    times = [f.time for f in frames]
    if any(t is None for t in times):
        return
    for a, b in zip(times, times[1:]):
        if b - a != FRAME_STEP:
            raise ValueError(f"frames are not uniformly spaced by 5 minutes ({a} -> {b})")


def make_samples(frames, window: int = 3) -> list[Sample]:
    """One sample per target index ``i`` in ``[window, n)``; inputs are the preceding frames."""
    if window < 1:
        raise ValueError("window must be >= 1")
    frames = list(frames)
    _check_spacing(frames)
    return [
        Sample(tuple(frames[i - window:i]), frames[i], frames[i].time)
        for i in range(window, len(frames))
    ]


def is_blank(sample: Sample, eps: float = 0.0) -> bool:
    return all(f.total() <= eps for f in sample.inputs)


def filter_blank(samples, eps: float = 0.0) -> list[Sample]:
    """Drop samples whose predictor frames all carry pixel-sum <= eps. Targets are ignored."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return [s for s in samples if not is_blank(s, eps)]


def temporal_split(items, train_fraction: float = 0.8):
    """Leading ``floor(n * train_fraction)`` items for training, the rest for test."""
    items = list(items)
    if not items:
        raise ValueError("cannot split an empty sequence")
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    # products like 100 * 0.29 = 28.999999999999996 must floor to 29
    cut = math.floor(float(f"{len(items) * train_fraction:.12g}"))
    return items[:cut], items[cut:]


def timeseries_folds(n: int, k: int = 5) -> list[tuple[np.ndarray, np.ndarray]]:
    """Expanding-window folds over ``n`` time-ordered samples.

    Validation blocks have size ``m = n // (k + 1)``; the remainder ``n - (k + 1) * m``
    is prepended to the first training window.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} samples, got {n}")
    m = n // (k + 1)
    offset = n - (k + 1) * m
    folds = []
    for i in range(1, k + 1):
        start = offset + i * m
        folds.append((np.arange(0, start), np.arange(start, start + m)))
    return folds


def partition_zones(frames) -> dict[ZoneId, list[VilField]]:
    zones = {z: [] for z in ZoneId}
    for f in frames:
        if f.shape != (FULL_FRAME, FULL_FRAME):
            raise DimensionError(f"expected {FULL_FRAME}x{FULL_FRAME} frames, got {f.shape}")
        for z, q in zip(QUADRANTS, split_quadrants(f)):
            zones[z].append(q)
        zones[ZoneId.CENTRAL].append(crop_center(f, ZONE_SIZE))
    return zones


def build_client_datasets(frames, train_fraction: float = 0.8, eps: float = 0.0,
                          window: int = 3, zones=None) -> dict[ZoneId, ClientDataset]:
    """Partition frames into zones, split each zone's timeline, window and blank-filter each split.

    The split point is taken on the shared frame timeline so every zone has the same
    train/test boundary; samples never straddle it.
    """
    frames = list(frames)
    train_frames, test_frames = temporal_split(frames, train_fraction)
    train_parts = partition_zones(train_frames)
    test_parts = partition_zones(test_frames)
    wanted = list(ZoneId) if zones is None else list(zones)
    return {
        z: ClientDataset(
            z,
            filter_blank(make_samples(train_parts[z], window), eps),
            filter_blank(make_samples(test_parts[z], window), eps),
        )
        for z in wanted
    }


def stack_samples(samples, target_size: int | None = 32, dtype=np.float32):
    """Arrays for the network: inputs (N, H, W, window) and center-cropped targets (N, s, s)."""
    x = np.stack([np.stack([f.values for f in s.inputs], axis=-1) for s in samples]).astype(dtype)
    y = np.stack([s.target.values for s in samples]).astype(dtype)
    if target_size is not None:
        y = center_window(y, target_size)
    return x, y


def center_window(arr: np.ndarray, size: int) -> np.ndarray:
    """Center crop of the two spatial axes of a (..., H, W) array."""
    h, w = arr.shape[-2:]
    if size > min(h, w):
        raise DimensionError(f"window {size} exceeds {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return arr[..., top:top + size, left:left + size]
