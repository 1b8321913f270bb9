"""VIL field value type and the geometric operations used to carve frames into zones."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from datetime import datetime

import numpy as np


class DimensionError(ValueError):
    """Raised when field shapes are incompatible with an operation."""


class ZoneId(enum.Enum):
    ZONE1 = "zone1"  # top-left
    ZONE2 = "zone2"  # top-right
    ZONE3 = "zone3"  # bottom-left
    ZONE4 = "zone4"  # bottom-right
    CENTRAL = "central"

    @classmethod
    def parse(cls, text: str) -> "ZoneId":
        key = text.strip().lower()
        if key in ("1", "2", "3", "4"):
            key = "zone" + key
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown zone {text!r}") from None


QUADRANTS = (ZoneId.ZONE1, ZoneId.ZONE2, ZoneId.ZONE3, ZoneId.ZONE4)


@dataclass(frozen=True, eq=False)
class VilField:
    """Non-negative 2D grid of vertically integrated liquid (kg/m^2).

    ``values`` is stored as a read-only float32 array of shape (height, width),
    which is also the on-disk precision. ``time`` is optional provenance and
    is carried through crops.
    """

    values: np.ndarray
    pixel_size_km: float = 1.0
    time: datetime | None = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float32, copy=True)
        if arr.ndim != 2:
            raise DimensionError(f"VIL field must be 2D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("VIL field contains non-finite values")
        if np.any(arr < 0):
            raise ValueError("VIL field contains negative values")
        if not self.pixel_size_km > 0:
            raise ValueError("pixel_size_km must be positive")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def total(self) -> float:
        return float(self.values.sum(dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, VilField):
            return NotImplemented
        return (
            self.pixel_size_km == other.pixel_size_km
            and self.time == other.time
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    def _derive(self, values) -> "VilField":
        return replace(self, values=values)


def crop_center(field: VilField, size: int) -> VilField:
    """Centered ``size`` x ``size`` window; an odd residue goes to the bottom/right."""
    if size < 1 or size > min(field.width, field.height):
        raise DimensionError(f"crop size {size} does not fit a {field.height}x{field.width} field")
    top = (field.height - size) // 2
    left = (field.width - size) // 2
    return field._derive(field.values[top:top + size, left:left + size])


def split_quadrants(field: VilField) -> tuple[VilField, VilField, VilField, VilField]:
    if field.height % 2 or field.width % 2:
        raise DimensionError(f"quadrant split needs even dimensions, got {field.height}x{field.width}")
    h, w = field.height // 2, field.width // 2
    v = field.values
    return (
        field._derive(v[:h, :w]),
        field._derive(v[:h, w:]),
        field._derive(v[h:, :w]),
        field._derive(v[h:, w:]),
    )


def join_quadrants(quads) -> VilField:
    """Inverse of :func:`split_quadrants`."""
    q1, q2, q3, q4 = quads
    if not (q1.shape == q2.shape == q3.shape == q4.shape):
        raise DimensionError("quadrants must share a shape")
    top = np.hstack([q1.values, q2.values])
    bottom = np.hstack([q3.values, q4.values])
    return q1._derive(np.vstack([top, bottom]))


def mean_vil(field: VilField) -> float:
    if field.values.size == 0:
        raise DimensionError("mean of an empty field")
    return float(field.values.mean(dtype=np.float64))


def accumulated_vil(field: VilField) -> float:
    """Summed VIL divided by the covered surface in km^2."""
    if field.values.size == 0:
        raise DimensionError("accumulated VIL of an empty field")
    area = (field.width * field.pixel_size_km) * (field.height * field.pixel_size_km)
    return field.total() / area
