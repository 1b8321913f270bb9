"""Binary frame files plus a ``frames.idx`` manifest.

Each frame file is a 16-byte little-endian header followed by width*height
float32 values in row-major order::

    b"VILF" | version:u16 | width:u16 | height:u16 | pixel_size_km:f32 | 2 zero bytes

The manifest holds one ``<ISO-8601 timestamp>\\t<filename>`` line per frame,
sorted by timestamp.
"""
from __future__ import annotations

import struct
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import FRAME_STEP
from .grid import VilField

MAGIC = b"VILF"
VERSION = 1
HEADER = struct.Struct("<4sHHHf2s")
MANIFEST = "frames.idx"
DEFAULT_START = datetime(2016, 4, 1, tzinfo=timezone.utc)


class FrameFormatError(ValueError):
    """Malformed frame file or manifest."""


def encode_frame(field: VilField) -> bytes:
    if field.width > 0xFFFF or field.height > 0xFFFF:
        raise ValueError("frame too large for u16 dimensions")
    header = HEADER.pack(MAGIC, VERSION, field.width, field.height, field.pixel_size_km, b"\0\0")
    return header + np.ascontiguousarray(field.values, dtype="<f4").tobytes()


def decode_frame(data: bytes, name: str = "<bytes>", time: datetime | None = None) -> VilField:
    if len(data) < HEADER.size:
        raise FrameFormatError(f"{name}: truncated header ({len(data)} bytes)")
    magic, version, width, height, pixel_size, reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FrameFormatError(f"{name}: bad magic {magic!r}")
    if version != VERSION:
        raise FrameFormatError(f"{name}: unsupported version {version}")
    if reserved != b"\0\0":
        raise FrameFormatError(f"{name}: reserved header bytes are not zero")
    expected = HEADER.size + 4 * width * height
    if len(data) != expected:
        raise FrameFormatError(f"{name}: payload is {len(data) - HEADER.size} bytes, expected {expected - HEADER.size}")
    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(height, width)
    try:
        return VilField(values, float(pixel_size), time)
    except ValueError as exc:
        raise FrameFormatError(f"{name}: {exc}") from None


def write_frames(frames, directory, start: datetime = DEFAULT_START) -> Path:
    """Write one file per frame plus the manifest. Frames without a time get ``start + i * 5 min``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    previous = None
    for i, f in enumerate(frames):
        t = f.time if f.time is not None else start + i * FRAME_STEP
        if previous is not None and t <= previous:
            raise ValueError(f"frame {i} is not after its predecessor ({t} <= {previous})")
        previous = t
        name = f"frame_{i:06d}.vil"
        (directory / name).write_bytes(encode_frame(f))
        lines.append(f"{t.isoformat()}\t{name}\n")
    (directory / MANIFEST).write_text("".join(lines), encoding="utf-8")
    return directory


def read_frames(directory) -> list[VilField]:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.exists():
        if directory.is_dir() and not any(directory.iterdir()):
            warnings.warn(f"{directory}: empty frame directory", stacklevel=2)
            return []
        raise FrameFormatError(f"{manifest}: manifest missing")
    frames = []
    previous = None
    listed = set()
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            stamp, name = line.split("\t")
            t = datetime.fromisoformat(stamp)
        except ValueError:
            raise FrameFormatError(f"{manifest}:{lineno}: malformed manifest line {line!r}") from None
        if previous is not None and t <= previous:
            raise FrameFormatError(f"{manifest}:{lineno}: timestamps not strictly ascending")
        previous = t
        path = directory / name
        if not path.exists():
            raise FrameFormatError(f"{path}: listed in manifest but missing")
        listed.add(name)
        frames.append(decode_frame(path.read_bytes(), str(path), t))
    on_disk = {p.name for p in directory.glob("*.vil")}
    if on_disk != listed:
        extra = sorted(on_disk - listed)
        raise FrameFormatError(f"{manifest}: frame files not in manifest: {extra[:5]}")
    if not frames:
        warnings.warn(f"{directory}: manifest lists no frames", stacklevel=2)
    return frames
