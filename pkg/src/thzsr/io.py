"""THZ3 volume files, CSV tables and PNG image export.

THZ3 layout (little-endian)::

    magic     4s   b"THZ3"
    version   u32  1
    nx, ny    u32
    nz        u32
    domain    u8   0 = frequency, 1 = spatial
    step_um   f32  lateral step
    samples   nx*ny*nz * (f32 real, f32 imag), x fastest, then y, then z
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .core import ComplexVolume, Domain

MAGIC = b"THZ3"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIBf")


class VolumeFormatError(Exception):
    """Base class for malformed THZ3 files."""


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedFileError(VolumeFormatError):
    pass


def write_volume(vol: ComplexVolume, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, vol.nx, vol.ny, vol.nz, int(vol.domain),
                          float(vol.lateral_step))
    # (ny, nx, nz) -> (nz, ny, nx) puts x fastest
    ordered = np.transpose(vol.data, (2, 0, 1))
    payload = np.empty(ordered.shape + (2,), dtype="<f4")
    payload[..., 0] = ordered.real
    payload[..., 1] = ordered.imag
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_volume(path) -> ComplexVolume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, nx, ny, nz, domain, step = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    expected = nx * ny * nz * 8
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    pairs = np.frombuffer(payload, dtype="<f4", count=nx * ny * nz * 2)
    pairs = pairs.reshape(nz, ny, nx, 2).astype(np.float64)
    data = np.transpose(pairs[..., 0] + 1j * pairs[..., 1], (1, 2, 0))
    try:
        domain = Domain(domain)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: unknown domain tag {domain}") from exc
    return ComplexVolume(data, domain=domain, lateral_step=float(step))


def quantize_f32(vol: ComplexVolume) -> ComplexVolume:
    """Volume with samples rounded to what a THZ3 file stores."""
    re = vol.data.real.astype(np.float32).astype(np.float64)
    im = vol.data.imag.astype(np.float32).astype(np.float64)
    return ComplexVolume(re + 1j * im, domain=vol.domain, lateral_step=vol.lateral_step)


def write_image_csv(values: np.ndarray, path) -> None:
    """Row-major, one image row per line."""
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.17g")


def read_image_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def write_image_png(values: np.ndarray, path, db: bool = False, floor_db: float = -40.0) -> None:
    """16-bit grayscale PNG, either linear (max -> 65535) or dB over ``[floor_db, 0]``."""
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    if db:
        peak = v.max() if v.size and v.max() > 0 else 1.0
        with np.errstate(divide="ignore"):
            scaled = 10.0 * np.log10(np.maximum(v, 0) / peak)
        scaled = (np.clip(scaled, floor_db, 0.0) - floor_db) / -floor_db
    else:
        lo, hi = v.min(), v.max()
        scaled = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    img = np.round(scaled * 65535).astype(np.uint16)
    Image.fromarray(img).save(path)


def read_image_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path), dtype=np.uint16)


def write_table_csv(rows: list[dict], path, columns: list[str] | None = None) -> None:
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def read_table_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
