"""Dense float32 logit arrays: channel ops, box masking and the JPTF container.

Tensors are plain ``numpy.ndarray`` objects in row-major (C) order. Logits
travel as ``float32``; label maps use ``uint16``.

Container layout (all fields little-endian)::

    magic    4 bytes  b"JPTF"
    version  u32      1
    dtype    u8       1 = float32, 2 = uint16
    ndim     u8
    reserved u16      0
    dims     ndim x u64
    payload  row-major elements
"""
from __future__ import annotations

import os
import struct
from typing import BinaryIO, NamedTuple

import numpy as np

MAGIC = b"JPTF"
VERSION = 1
_HEADER = struct.Struct("<4sIBBH")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<u2")}
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.uint16): 2}


class ShapeError(ValueError):
    pass


class BoundsError(ValueError):
    pass


class TensorFormatError(ValueError):
    """Base class for malformed tensor containers."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class BBox(NamedTuple):
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def check(self, height: int, width: int) -> "BBox":
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise BoundsError(f"box {tuple(self)} is not inside a {height}x{width} image")
        return self

    def contains(self, y: int, x: int) -> bool:
        return self.y0 <= y < self.y1 and self.x0 <= x < self.x1


def _require_chw(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 3:
        raise ShapeError(f"{name} must have shape [C, H, W], got {t.shape}")
    return t


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        return np.float32(1.0) / (np.float32(1.0) + np.exp(-x))


def softmax_terms(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shifted exponentials and their per-pixel sum.

    ``softmax_channels(t) == exps / denom`` elementwise, which lets callers
    normalize only the channels and pixels they need.
    """
    t = _require_chw(t).astype(np.float32, copy=False)
    exps = t - t.max(axis=0, keepdims=True)
    np.exp(exps, out=exps)
    denom = exps[0].copy()
    for c in range(1, exps.shape[0]):
        denom += exps[c]
    return exps, denom


def softmax_channels(t: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the leading channel axis of a [C, H, W] array."""
    exps, denom = softmax_terms(t)
    exps /= denom
    return exps


def mask_by_bbox(t: np.ndarray, box: BBox) -> np.ndarray:
    """Copy of ``t`` with everything outside ``box`` set to 0."""
    t = _require_chw(t)
    box = BBox(*box).check(t.shape[1], t.shape[2])
    out = np.zeros_like(t)
    ys, xs = box.slices
    out[:, ys, xs] = t[:, ys, xs]
    return out


def max_argmax_channels(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel maximum over channels and its index (lowest index on ties)."""
    t = _require_chw(t)
    if t.shape[0] == 0:
        raise ShapeError("need at least one channel")
    # a channel loop beats np.argmax(axis=0), which walks the array strided
    best = t[0].copy()
    arg = np.zeros(t.shape[1:], np.intp)
    upd = np.empty(t.shape[1:], bool)
    for c in range(1, t.shape[0]):
        np.greater(t[c], best, out=upd)
        np.copyto(best, t[c], where=upd)
        np.copyto(arg, c, where=upd)
    return best, arg


def argmax_channels(t: np.ndarray) -> np.ndarray:
    """Per-pixel channel index of the maximum; ties resolve to the lowest index."""
    return max_argmax_channels(t)[1]


def write_tensor(t: np.ndarray, sink: BinaryIO) -> None:
    t = np.asarray(t)
    code = _DTYPE_CODES.get(np.dtype(t.dtype.type))
    if code is None:
        raise TypeError(f"unsupported dtype {t.dtype}; expected float32 or uint16")
    if t.ndim < 1 or t.ndim > 255 or any(d < 1 for d in t.shape):
        raise ShapeError(f"cannot serialize shape {t.shape}")
    sink.write(_HEADER.pack(MAGIC, VERSION, code, t.ndim, 0))
    sink.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    sink.write(np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes())


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_tensor(source: BinaryIO) -> np.ndarray:
    head = source.read(_HEADER.size)
    if len(head) >= 4 and head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if len(head) != _HEADER.size:
        raise TruncatedError(f"truncated header: got {len(head)} of {_HEADER.size} bytes")
    _, version, code, ndim, reserved = _HEADER.unpack(head)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    if reserved != 0 or ndim == 0:
        raise TensorFormatError(f"malformed header (ndim={ndim}, reserved={reserved})")
    dims = struct.unpack(f"<{ndim}Q", _read_exact(source, 8 * ndim, "dims"))
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}")
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.uint64))
    payload = source.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise TruncatedError(
            f"truncated payload: header declares {count} elements, "
            f"got {len(payload) // dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def save_tensor(path: str | os.PathLike, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(t, fh)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
