"""MSDT binary tensor container.

Layout: ``b"MSDT"``, version byte (1), dtype code byte, rank byte,
``rank`` little-endian u64 extents, then the row-major little-endian payload.
Several containers may be concatenated in one stream.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

MAGIC = b"MSDT"
VERSION = 1

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_KINDS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


class ContainerError(ValueError):
    """Raised for malformed or truncated MSDT data."""


def write_array(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _KINDS.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ContainerError(f"unsupported dtype {array.dtype}")
    if array.ndim > 255:
        raise ContainerError("rank exceeds 255")
    stream.write(MAGIC + bytes([VERSION, code, array.ndim]))
    stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype=_CODES[code]).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def read_array(stream: BinaryIO) -> np.ndarray:
    header = _read_exact(stream, 7)
    if header[:4] != MAGIC:
        raise ContainerError(f"bad magic {header[:4]!r}")
    version, code, rank = header[4], header[5], header[6]
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code not in _CODES:
        raise ContainerError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank))
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(stream, count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def iter_arrays(stream: BinaryIO) -> Iterator[np.ndarray]:
    while True:
        peek = stream.read(1)
        if not peek:
            return
        stream.seek(-1, 1)
        yield read_array(stream)


def save(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, array)


def load(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        array = read_array(fh)
        if fh.read(1):
            raise ContainerError(f"{path}: trailing bytes after tensor")
    return array
