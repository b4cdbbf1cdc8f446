"""Binary tensor records.

A record is a little-endian header ``"STKT" | u32 version | u8 dtype |
u32 rank | u64 dims[rank]`` followed by the row-major payload. Several
records can be concatenated in one file; a record is then addressed as
``"file#offset"`` with the byte offset of its header.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"STKT"
VERSION = 1
_HEAD = struct.Struct("<4sIBI")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class TensorFormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        arr = arr.astype(np.float64)
        code = 0
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + dims + payload


def decode(buf, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record at ``offset``; returns the array and the offset just past it."""
    if len(buf) - offset < _HEAD.size:
        raise TensorFormatError(f"truncated header at offset {offset}")
    magic, version, code, rank = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r} at offset {offset}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    pos = offset + _HEAD.size
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + n * dtype.itemsize
    if end > len(buf):
        raise TensorFormatError(f"truncated payload at offset {offset}")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), end


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> int:
    """Append ``arr`` to an open binary file; returns the record's offset."""
    offset = fh.tell()
    fh.write(encode(arr))
    return offset


def save_tensors(path: str | os.PathLike, arrays: Iterable[np.ndarray]) -> list[int]:
    offsets = []
    with open(path, "wb") as fh:
        for arr in arrays:
            offsets.append(write_tensor(fh, arr))
    return offsets


def load_tensor(path: str | os.PathLike, offset: int = 0) -> np.ndarray:
    mm = np.memmap(path, dtype=np.uint8, mode="r")
    arr, _ = decode(mm, offset)
    return arr


def load_all(path: str | os.PathLike) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode(buf, pos)
        out.append(arr)
    return out


def parse_ref(ref: str) -> tuple[str, int]:
    name, _, off = ref.partition("#")
    if not name or not off.isdigit():
        raise TensorFormatError(f"malformed tensor reference {ref!r}")
    return name, int(off)


class TensorReader:
    """Resolves ``file#offset`` references relative to a base directory.

    Files are memory-mapped on first use and decoded records are cached.
    """

    def __init__(self, base: str | os.PathLike):
        self.base = Path(base)
        self._maps: dict[str, np.memmap] = {}
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, ref: str) -> np.ndarray:
        hit = self._cache.get(ref)
        if hit is not None:
            return hit
        name, off = parse_ref(ref)
        mm = self._maps.get(name)
        if mm is None:
            path = self.base / name
            if not path.exists():
                raise FileNotFoundError(f"tensor file {path} referenced by {ref!r} is missing")
            mm = self._maps[name] = np.memmap(path, dtype=np.uint8, mode="r")
        arr, _ = decode(mm, off)
        self._cache[ref] = arr
        return arr
