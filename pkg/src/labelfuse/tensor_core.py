"""Dense tensor plumbing shared by every other module: the TLT1 binary tensor
format and a deterministic, platform-independent random number generator.

Tensors are plain ``numpy.ndarray`` values, always C-contiguous (row-major,
channels innermost) and restricted to three dtypes: float32, float64 and
uint8.  Files use the ".tlt" extension by convention.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"TLT1"

# dtype tag values in the TLT1 header
TAG_F32 = 0
TAG_F64 = 1
TAG_U8 = 2

_TAG_TO_DTYPE = {
    TAG_F32: np.dtype("<f4"),
    TAG_F64: np.dtype("<f8"),
    TAG_U8: np.dtype("u1"),
}


class TensorFormatError(ValueError):
    """A TLT1 stream is malformed (bad magic, bad tag, truncation...)."""


def check_tensor(t: np.ndarray) -> np.ndarray:
    """Validate a tensor value and return it as a C-contiguous array.

    Requires rank >= 1, every dim >= 1 and a supported dtype.
    """
    t = np.asarray(t)
    if t.ndim < 1:
        raise ValueError("tensor rank must be >= 1 (got a scalar)")
    if any(d < 1 for d in t.shape):
        raise ValueError(f"tensor dims must all be >= 1, got {t.shape}")
    if t.dtype not in (np.float32, np.float64, np.uint8):
        raise ValueError(f"unsupported tensor dtype {t.dtype} (want f32/f64/u8)")
    return np.ascontiguousarray(t)


def _tag_for(t: np.ndarray) -> int:
    if t.dtype == np.float32:
        return TAG_F32
    if t.dtype == np.float64:
        return TAG_F64
    return TAG_U8


def write_tensor(t: np.ndarray, dest: BinaryIO) -> int:
    """Write ``t`` to a byte sink in TLT1 format, returning the byte count.

    Layout: magic "TLT1", u8 rank, rank little-endian u32 dims, u8 dtype tag
    (0=f32, 1=f64, 2=u8), then the raw little-endian row-major payload.
    """
    t = check_tensor(t)
    if t.ndim > 255:
        raise ValueError("rank does not fit in a u8")
    if any(d > 0xFFFFFFFF for d in t.shape):
        raise ValueError("dim does not fit in a u32")
    header = (
        MAGIC
        + struct.pack("<B", t.ndim)
        + struct.pack(f"<{t.ndim}I", *t.shape)
        + struct.pack("<B", _tag_for(t))
    )
    payload = t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    written = 0
    for blob in (header, payload):
        try:
            dest.write(blob)
        except OSError as e:
            raise OSError(f"write failed at byte offset {written}: {e}") from e
        written += len(blob)
    return written


def _read_exact(src: BinaryIO, n: int, field: str) -> bytes:
    data = src.read(n)
    if len(data) != n:
        raise TensorFormatError(
            f"truncated stream while reading {field}: wanted {n} bytes, got {len(data)}"
        )
    return data


def read_tensor(src: BinaryIO) -> np.ndarray:
    """Read one TLT1 tensor from a byte stream (inverse of write_tensor)."""
    magic = _read_exact(src, 4, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    rank = _read_exact(src, 1, "rank")[0]
    if rank < 1:
        raise TensorFormatError("rank must be >= 1")
    dims = struct.unpack(f"<{rank}I", _read_exact(src, 4 * rank, "dims"))
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"dims must all be >= 1, got {dims}")
    tag = _read_exact(src, 1, "dtype tag")[0]
    if tag not in _TAG_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dtype = _TAG_TO_DTYPE[tag]
    count = math.prod(dims)
    payload = _read_exact(src, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_tensor(path, t: np.ndarray) -> int:
    with open(path, "wb") as f:
        return write_tensor(t, f)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


_MASK64 = (1 << 64) - 1
_INV_2_53 = 2.0 ** -53
_MIN_U = 2.0 ** -53


class Rng:
    """splitmix64 generator: tiny, portable, bit-exact across platforms.

    An Rng is a value.  Parallel code must split seeds explicitly
    (``child = Rng(parent.next_u64())``) instead of sharing one stream.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """A draw in [0, 1): the top 53 bits of next_u64 scaled by 2**-53."""
        return (self.next_u64() >> 11) * _INV_2_53

    def normal(self) -> float:
        """Standard normal via Box-Muller (u1 clamped away from zero)."""
        u1 = max(self.uniform(), _MIN_U)
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def split(self) -> "Rng":
        """A fresh independent stream seeded from this one."""
        return Rng(self.next_u64())
