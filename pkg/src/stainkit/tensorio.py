"""Binary containers for tensors and model checkpoints.

Tensor container layout, all integers little-endian:

    magic ``STPK`` | u32 format version | u32 rank | rank x u64 extents |
    raw float32 data, C order

Checkpoint layout:

    magic ``STPC`` | u32 format version | u32 config length | UTF-8 JSON |
    u32 record count | per record: u32 name length, UTF-8 name, tensor
    container; records sorted by name
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"STPK"
CHECKPOINT_MAGIC = b"STPC"
FORMAT_VERSION = 1

_MAX_RANK = 4


class ContainerError(ValueError):
    """Malformed or unsupported container data."""


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(fp: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim > _MAX_RANK:
        raise ContainerError(f"rank {arr.ndim} exceeds the supported maximum of {_MAX_RANK}")
    if not np.isfinite(arr).all():
        raise ContainerError("refusing to serialize non-finite values")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<II", FORMAT_VERSION, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    magic = _read_exact(fp, 4)
    if magic != TENSOR_MAGIC:
        raise ContainerError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fp, 8))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported tensor format version {version}")
    if rank > _MAX_RANK:
        raise ContainerError(f"rank {rank} exceeds the supported maximum of {_MAX_RANK}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fp, 4 * count), dtype="<f4").astype(np.float32)
    arr = data.reshape(shape)
    if not np.isfinite(arr).all():
        raise ContainerError("tensor container holds non-finite values")
    return arr


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, array)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)


def write_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fp.write(blob)
        fp.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            encoded = name.encode("utf-8")
            fp.write(struct.pack("<I", len(encoded)))
            fp.write(encoded)
            write_tensor(fp, tensors[name])


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fp:
        magic = _read_exact(fp, 4)
        if magic != CHECKPOINT_MAGIC:
            raise ContainerError(f"bad checkpoint magic {magic!r}")
        version, blob_len = struct.unpack("<II", _read_exact(fp, 8))
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported checkpoint format version {version}")
        config = json.loads(_read_exact(fp, blob_len).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fp, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fp, 4))
            name = _read_exact(fp, name_len).decode("utf-8")
            if name in tensors:
                raise ContainerError(f"duplicate tensor record {name!r}")
            tensors[name] = read_tensor(fp)
        if fp.read(1):
            raise ContainerError("trailing bytes after checkpoint records")
    return config, tensors
