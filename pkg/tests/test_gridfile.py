import struct

import numpy as np
import pytest

from stcvit.data_pipeline import GridSequence, LatLonGrid, generate_synthetic
from stcvit.gridfile import (
    BadMagicError, GridFormatError, TruncatedGridError, VersionMismatchError, decode_grid, encode_grid, read_grid,
    write_grid,
)


@pytest.fixture
def sequence():
    return generate_synthetic(LatLonGrid.equiangular(4, 8), 6, seed=11)


def test_roundtrip_is_bit_identical(tmp_path, sequence):
    path = tmp_path / "d.stcg"
    size = write_grid(path, sequence)
    assert path.stat().st_size == size
    back = read_grid(path)
    assert back.var_names == sequence.var_names
    assert back.dt_hours == sequence.dt_hours
    np.testing.assert_array_equal(back.grid.lats, sequence.grid.lats)
    np.testing.assert_array_equal(back.grid.lons, sequence.grid.lons)
    np.testing.assert_array_equal(back.stack(), sequence.stack())
    assert [s.time for s in back] == list(range(6))


def test_header_layout(sequence):
    payload = encode_grid(sequence)
    magic, version, v, h, w, n, dt = struct.unpack_from("<4sIIIIIf", payload, 0)
    assert (magic, version, v, h, w, n, dt) == (b"STCG", 1, 4, 4, 8, 6, 6.0)
    names_len = sum(4 + len(name) for name in sequence.var_names)
    assert len(payload) == 28 + names_len + 8 * (4 + 8) + 4 * 4 * 4 * 8 * 6


def test_empty_sequence(tmp_path):
    empty = GridSequence(LatLonGrid.equiangular(4, 8), ("t2m", "z500"), 6.0, [])
    write_grid(tmp_path / "empty.stcg", empty)
    back = read_grid(tmp_path / "empty.stcg")
    assert len(back) == 0
    assert back.var_names == ("t2m", "z500")


def test_bad_magic(sequence):
    payload = bytearray(encode_grid(sequence))
    payload[:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        decode_grid(bytes(payload))


def test_version_mismatch(sequence):
    payload = bytearray(encode_grid(sequence))
    payload[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode_grid(bytes(payload))


def test_truncated_payload(sequence):
    payload = encode_grid(sequence)
    with pytest.raises(TruncatedGridError):
        decode_grid(payload[:-5])
    with pytest.raises(TruncatedGridError):
        decode_grid(payload[:10])


def test_trailing_bytes_rejected(sequence):
    with pytest.raises(GridFormatError):
        decode_grid(encode_grid(sequence) + b"\x00")


def test_errors_are_distinct():
    assert len({BadMagicError, TruncatedGridError, VersionMismatchError}) == 3
    assert all(issubclass(e, GridFormatError) for e in (BadMagicError, TruncatedGridError, VersionMismatchError))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_grid(tmp_path / "nope.stcg")
