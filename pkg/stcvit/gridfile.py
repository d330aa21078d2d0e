"""
Binary grid file (little-endian):

    magic "STCG" | version u32 | V u32 | H u32 | W u32 | n_steps u32 | dt_hours f32
    V x (u32 length + UTF-8 name) | H x f64 lat | W x f64 lon
    n_steps x (V*H*W f32), time-major then variable-major
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .data_pipeline import GridSample, GridSequence, LatLonGrid
from .logger import logger

MAGIC = b"STCG"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIf")


class GridFormatError(ValueError):
    pass


class BadMagicError(GridFormatError):
    pass


class VersionMismatchError(GridFormatError):
    pass


class TruncatedGridError(GridFormatError):
    pass


def encode_grid(sequence: GridSequence) -> bytes:
    names = [n.encode("utf-8") for n in sequence.var_names]
    h, w = sequence.grid.shape
    parts = [_HEADER.pack(MAGIC, VERSION, len(names), h, w, len(sequence), sequence.dt_hours)]
    for name in names:
        parts.append(struct.pack("<I", len(name)) + name)
    parts.append(sequence.grid.lats.astype("<f8").tobytes())
    parts.append(sequence.grid.lons.astype("<f8").tobytes())
    for sample in sequence.samples:
        parts.append(np.ascontiguousarray(sample.fields, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_grid(payload: bytes, start_time: int = 0) -> GridSequence:
    if len(payload) < 4 or payload[:4] != MAGIC:
        raise BadMagicError(f"Bad magic {payload[:4]!r}; not a grid file")
    if len(payload) < _HEADER.size:
        raise TruncatedGridError("Grid header is truncated")
    _, version, n_vars, h, w, n_steps, dt_hours = _HEADER.unpack_from(payload, 0)
    if version != VERSION:
        raise VersionMismatchError(f"Grid file version {version}, expected {VERSION}")

    offset = _HEADER.size
    names = []
    for _ in range(n_vars):
        if offset + 4 > len(payload):
            raise TruncatedGridError("Variable name table is truncated")
        (length,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        if offset + length > len(payload):
            raise TruncatedGridError("Variable name table is truncated")
        names.append(payload[offset:offset + length].decode("utf-8"))
        offset += length

    block = n_vars * h * w
    expected = offset + 8 * (h + w) + 4 * block * n_steps
    if len(payload) < expected:
        raise TruncatedGridError(f"Grid payload truncated: {len(payload)} bytes, expected {expected}")
    if len(payload) > expected:
        raise GridFormatError(f"Grid payload has {len(payload) - expected} trailing bytes")

    lats = np.frombuffer(payload, dtype="<f8", count=h, offset=offset).astype(np.float64)
    offset += 8 * h
    lons = np.frombuffer(payload, dtype="<f8", count=w, offset=offset).astype(np.float64)
    offset += 8 * w
    data = np.frombuffer(payload, dtype="<f4", count=block * n_steps, offset=offset)
    data = data.astype(np.float32).reshape(n_steps, n_vars, h, w)

    dt = float(dt_hours)
    samples = [GridSample(start_time + t, data[t].copy(), tuple(names), dt) for t in range(n_steps)]
    return GridSequence(LatLonGrid(lats, lons), tuple(names), dt, samples)


def write_grid(path: Union[str, Path], sequence: GridSequence) -> int:
    payload = encode_grid(sequence)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info(f"Wrote grid file {path}", extra={"steps": len(sequence), "bytes": len(payload)})
    return len(payload)


def read_grid(path: Union[str, Path], start_time: int = 0) -> GridSequence:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Grid file not found: {path}")
    return decode_grid(path.read_bytes(), start_time)
