"""Dense float64 tensors: validation, min-max scaling, reshaping, DVKT file I/O.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order with rank 1 to 4. Every public function here returns a fresh array and
refuses to produce NaN or infinity.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, FormatError, NumericalError, ShapeError

MAX_RANK = 4

DVKT_MAGIC = b"DVKT"
DVKT_VERSION = 1
DTYPE_F64_LE = 1
_HEADER = struct.Struct("<4sBBB")
_MAX_ENTRIES = 2**40


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"{what} contains {bad} non-finite value(s)")
    return x


def as_tensor(x, rank: tuple[int, int] = (1, MAX_RANK)) -> np.ndarray:
    """Coerce to a contiguous float64 array and validate rank and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if not rank[0] <= arr.ndim <= rank[1]:
        raise ShapeError(f"expected rank in [{rank[0]}, {rank[1]}], got {arr.ndim}")
    arr = np.ascontiguousarray(arr)
    if arr.size == 0:
        raise ShapeError("tensor is empty")
    return check_finite(arr)


@dataclass(frozen=True)
class NormalizationParams:
    """Statistics of a min-max scaling so it can be undone later."""

    data_min: float
    data_max: float
    low: float = 0.1
    high: float = 0.9

    def __post_init__(self):
        if not self.data_min <= self.data_max:
            raise DegenerateInputError("data_min must not exceed data_max")
        if not self.low < self.high:
            raise DegenerateInputError("target interval must satisfy low < high")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(float(d["data_min"]), float(d["data_max"]), float(d["low"]), float(d["high"]))


def fit_normalization(x, a: float = 0.1, b: float = 0.9) -> NormalizationParams:
    """Collect min/max of ``x`` for a later :func:`apply_normalization`."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("cannot normalize an empty tensor")
    check_finite(x)
    if not a < b:
        raise DegenerateInputError(f"target interval [{a}, {b}] is empty")
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        raise DegenerateInputError(f"constant input ({lo}) has no range to normalize")
    return NormalizationParams(lo, hi, float(a), float(b))


def apply_normalization(x, p: NormalizationParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = (p.high - p.low) * ((x - p.data_min) / (p.data_max - p.data_min)) + p.low
    return check_finite(y, "normalized tensor")


def minmax_normalize(x, a: float = 0.1, b: float = 0.9) -> tuple[np.ndarray, NormalizationParams]:
    """Map ``x`` linearly onto ``[a, b]``; min goes to ``a`` and max to ``b``.

    Raises DegenerateInputError for constant input rather than inventing contrast.
    """
    p = fit_normalization(x, a, b)
    y = apply_normalization(x, p)
    # pin the endpoints against rounding in the affine map
    x = np.asarray(x, dtype=np.float64)
    y[x == p.data_min] = p.low
    y[x == p.data_max] = p.high
    return np.clip(y, p.low, p.high), p


def denormalize(y, p: NormalizationParams) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    x = (y - p.low) / (p.high - p.low) * (p.data_max - p.data_min) + p.data_min
    return check_finite(x, "denormalized tensor")


def reshape(x, new_shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} entries) to {new_shape}")
    return np.array(x.reshape(new_shape, order="C"))


def crop_slices(shape, target) -> tuple[slice, ...]:
    """Slices selecting the centered window; odd excess drops floor(e/2) on the low side."""
    if len(target) != len(shape):
        raise ShapeError(f"target rank {len(target)} differs from tensor rank {len(shape)}")
    out = []
    for n, t in zip(shape, target):
        if t > n or t < 1:
            raise ShapeError(f"cannot crop axis of size {n} to {t}")
        lo = (n - t) // 2
        out.append(slice(lo, lo + t))
    return tuple(out)


def center_crop(x, target) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.array(x[crop_slices(x.shape, tuple(target))])


# -- DVKT binary format ------------------------------------------------------


def encode_tensor(x) -> bytes:
    x = as_tensor(x)
    head = _HEADER.pack(DVKT_MAGIC, DVKT_VERSION, DTYPE_F64_LE, x.ndim)
    dims = struct.pack(f"<{x.ndim}I", *x.shape)
    return head + dims + x.astype("<f8", copy=False).tobytes(order="C")


def decode_header(buf: bytes, offset: int = 0) -> tuple[tuple[int, ...], int]:
    """Parse a DVKT header; returns (shape, payload offset)."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated DVKT header")
    magic, version, dtype, rank = _HEADER.unpack_from(buf, offset)
    if magic != DVKT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DVKT_MAGIC!r}")
    if version != DVKT_VERSION:
        raise FormatError(f"unsupported DVKT version {version}")
    if dtype != DTYPE_F64_LE:
        raise FormatError(f"unsupported dtype code {dtype}")
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"unsupported rank {rank}")
    offset += _HEADER.size
    if len(buf) - offset < 4 * rank:
        raise FormatError("truncated DVKT dimension block")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    if any(d == 0 for d in shape):
        raise FormatError(f"zero-sized dimension in {shape}")
    if math.prod(shape) > _MAX_ENTRIES:
        raise FormatError(f"dimension overflow: {shape} has more than {_MAX_ENTRIES} entries")
    return tuple(shape), offset + 4 * rank


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    shape, offset = decode_header(buf, offset)
    nbytes = 8 * math.prod(shape)
    if len(buf) - offset < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - offset}")
    x = np.frombuffer(buf, dtype="<f8", count=math.prod(shape), offset=offset)
    x = x.astype(np.float64).reshape(shape)
    return check_finite(x, "DVKT payload"), offset + nbytes


def write_tensor(path, x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    x, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after DVKT payload")
    return x


# -- continuous convolution ----------------------------------------------------


def quad_convolve(f: Callable[[float], float], g: Callable[[float], float],
                  x: float, steps: int = 1000) -> float:
    """(f * g)(x) = integral over [0, x] of f(tau) g(x - tau), by composite Simpson."""
    if steps < 2 or steps % 2:
        raise ValueError("steps must be an even number >= 2")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    h = x / steps
    tau = np.linspace(0.0, x, steps + 1)
    vals = np.array([f(t) * g(x - t) for t in tau], dtype=np.float64)
    check_finite(vals, "integrand")
    w = np.ones(steps + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float(h / 3.0 * np.dot(w, vals))
