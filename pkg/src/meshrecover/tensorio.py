"""Binary tensor files and named-tensor archives.

Single tensor layout (all integers little-endian)::

    magic    8 bytes  b"MRTENS01"
    rank     u32
    dims     u32 * rank
    dtype    u32      0 = f32, 1 = f64, 2 = u8
    payload  prod(dims) * itemsize bytes, row-major

Archive layout::

    magic    8 bytes  b"MRARCH01"
    count    u32
    entries  count * (u32 name_len, utf-8 name, u32 blob_len, tensor blob)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"MRTENS01"
ARCHIVE_MAGIC = b"MRARCH01"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class TensorFormatError(ValueError):
    """Malformed tensor or archive bytes. ``offset`` is where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.bool_:
        return 2
    try:
        return _CODES[np.dtype(arr.dtype).newbyteorder("=")]
    except KeyError:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint8") from None


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<I", code)
    return header + data.tobytes(order="C")


def decode_tensor(buf: bytes, base_offset: int = 0) -> np.ndarray:
    """Parse one tensor blob; the blob must contain exactly one tensor."""
    arr, end = _decode_at(buf, 0, base_offset)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes after tensor", base_offset + end)
    return arr


def _decode_at(buf: bytes, pos: int, base: int) -> tuple[np.ndarray, int]:
    if len(buf) < pos + 12:
        raise TensorFormatError("truncated tensor header", base + len(buf))
    if buf[pos:pos + 8] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {bytes(buf[pos:pos + 8])!r}", base + pos)
    (rank,) = struct.unpack_from("<I", buf, pos + 8)
    pos += 12
    if rank > 32:
        raise TensorFormatError(f"implausible rank {rank}", base + pos - 4)
    need = 4 * rank + 4
    if len(buf) < pos + need:
        raise TensorFormatError("truncated dims", base + len(buf))
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    (code,) = struct.unpack_from("<I", buf, pos + 4 * rank)
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", base + pos + 4 * rank)
    pos += need
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise TensorFormatError(
            f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}", base + len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [ARCHIVE_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        blob = encode_tensor(arr)
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def decode_archive(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12:
        raise TensorFormatError("truncated archive header", len(buf))
    if buf[:8] != ARCHIVE_MAGIC:
        raise TensorFormatError(f"bad archive magic {bytes(buf[:8])!r}", 0)
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buf) < pos + 4:
            raise TensorFormatError("truncated entry name length", len(buf))
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + nlen + 4:
            raise TensorFormatError("truncated entry name", len(buf))
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (blen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) < pos + blen:
            raise TensorFormatError(f"entry {name!r} truncated", len(buf))
        out[name] = decode_tensor(bytes(buf[pos:pos + blen]), base_offset=pos)
        pos += blen
    if pos != len(buf):
        raise TensorFormatError(f"{len(buf) - pos} trailing bytes after archive", pos)
    return out


def write_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def read_archive(path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


def read_any(path) -> dict[str, np.ndarray] | np.ndarray:
    """Read either a single tensor or an archive, dispatching on the magic."""
    buf = Path(path).read_bytes()
    if buf[:8] == ARCHIVE_MAGIC:
        return decode_archive(buf)
    return decode_tensor(buf)
