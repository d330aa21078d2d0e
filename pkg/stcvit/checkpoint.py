"""
Checkpoint file (little-endian):

    magic "STCK" | version u32 | header length u32 | UTF-8 JSON header
    n_tensors u32 | per tensor: name length u32, name, dtype u8, ndim u32, dims u32 x ndim, data

The JSON header carries the model config, the input normalization statistics
and free-form metadata (split fractions, training summary).
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .data_pipeline import NormalizationStats
from .logger import logger
from .model import ForecastModel, ModelConfig, build_variant

MAGIC = b"STCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: ForecastModel
    stats: NormalizationStats
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config


def encode_checkpoint(model: ForecastModel, stats: NormalizationStats,
                      metadata: Optional[Dict[str, Any]] = None) -> bytes:
    header = {
        "config": model.config.model_dump(),
        "stats": {
            "var_names": list(stats.var_names),
            "mean": stats.mean.tolist(),
            "std": stats.std.tolist(),
        },
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes, struct.pack("<I", len(state))]
    for name, array in state.items():
        if array.dtype not in _CODES:
            raise CheckpointError(f"Unsupported parameter dtype {array.dtype} for {name}")
        code = _CODES[array.dtype]
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<BI", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointError("Checkpoint is truncated")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(payload: bytes) -> Checkpoint:
    reader = _Reader(payload)
    if reader.take(4) != MAGIC:
        raise CheckpointError("Bad magic; not a checkpoint file")
    version, header_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"Checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        stats = NormalizationStats(tuple(header["stats"]["var_names"]), np.array(header["stats"]["mean"]),
                                   np.array(header["stats"]["std"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Invalid checkpoint header: {e}") from e

    (n_tensors,) = reader.unpack("<I")
    state: Dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"Unknown dtype code {code} for {name}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)
        state[name] = data.astype(dtype.newbyteorder("=")).reshape(shape)
    if reader.offset != len(payload):
        raise CheckpointError(f"Checkpoint has {len(payload) - reader.offset} trailing bytes")

    model = build_variant(config)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"Checkpoint tensors do not match the {config.variant} model: {e}") from e
    model.eval()
    return Checkpoint(model, stats, header.get("metadata", {}))


def save_checkpoint(path: Union[str, Path], model: ForecastModel, stats: NormalizationStats,
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(model, stats, metadata)
    path.write_bytes(payload)
    logger.info(f"Saved checkpoint {path}", extra={"bytes": len(payload), "variant": model.config.variant})
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
