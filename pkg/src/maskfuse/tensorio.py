"""Tensor file I/O, PGM emission, and the deterministic RNG.

File format (bit-exact, little-endian):
    magic "FFT1" | version u32 = 1 | ndim u32 | shape ndim x u64 | payload f32 row-major

One payload dtype only (f32) so golden files compare byte-for-byte across
platforms. PGM output is binary P5 with maxval 255.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    NonFiniteValuesError,
    ShapeError,
    TensorFormatError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

MAGIC = b"FFT1"
VERSION = 1
_MAX_NDIM = 32

# splitmix64 constants
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_BASIS = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def save_tensor(t: np.ndarray, path) -> None:
    """Write `t` as a little-endian f32 tensor file (cast if needed)."""
    arr = np.ascontiguousarray(t, dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor file, validating magic, version, length, and finiteness."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(raw)} bytes")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}, expected {VERSION}")
    if ndim < 1 or ndim > _MAX_NDIM:
        raise TensorFormatError(f"{path}: unreasonable ndim {ndim}")
    if len(raw) < 12 + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(raw)} bytes")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    if any(d <= 0 for d in shape):
        raise TensorFormatError(f"{path}: non-positive dimension in shape {shape}")
    n = math.prod(shape)
    payload = raw[12 + 8 * ndim:]
    if len(payload) != 4 * n:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(payload)} bytes, shape {shape} needs {4 * n}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValuesError(f"{path}: payload contains NaN or Inf")
    return arr.copy()


@dataclass
class PixelGrid:
    """H x W x C image with values clamped to [0, 1] on construction."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ShapeError(f"PixelGrid needs HxW or HxWx{{1,3}} values, got {v.shape}")
        if v.shape[0] * v.shape[1] < 1:
            raise ShapeError("PixelGrid must contain at least one pixel")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def write_pgm(grid: PixelGrid, path, max_val: int = 255) -> None:
    """Write a single-channel grid as binary PGM (P5).

    Bytes are round(v * max_val) with halves rounded away from zero, so
    golden files are unambiguous.
    """
    if grid.channels != 1:
        raise ShapeError(f"PGM needs a single-channel grid, got {grid.channels} channels")
    if not 1 <= max_val <= 255:
        raise ValueError(f"max_val must be in [1, 255], got {max_val}")
    v = grid.values[:, :, 0].astype(np.float64)
    # values are >= 0, so half-away-from-zero == floor(x + 0.5)
    data = np.floor(v * max_val + 0.5).astype(np.uint8)
    header = f"P5\n{grid.width} {grid.height}\n{max_val}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def _mix64(z: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the intended modular arithmetic
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> np.uint64:
    h = _FNV_BASIS
    with np.errstate(over="ignore"):
        for b in text.encode("utf-8"):
            h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


@dataclass
class SeededRng:
    """Counter-based splitmix64 generator.

    Output i is a pure function of (seed, i), computed with uint64 wraparound
    arithmetic only, so equal seeds give equal sequences on every platform.
    """

    seed: int
    _counter: int = field(default=0, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) % (1 << 64)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self.seed) + idx * _GOLDEN
        return _mix64(states)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in [low, high) from the top 53 bits of each word."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape) if shape else 1
        m = (n + 1) // 2
        # u1 in (0, 1] so log() is finite
        u1 = ((self.next_u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (self.next_u64(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[:n].reshape(shape)

    def derive(self, label: str) -> "SeededRng":
        """Independent child stream keyed by a text label."""
        child = _mix64(np.uint64(self.seed) ^ _fnv1a64(label))
        return SeededRng(int(child))
