"""Dense 2-D tensors, stable softmax statistics, rotary embeddings, seeded PRNG.

Every other module builds on the operations here. All values are plain
numpy arrays wrapped in an immutable :class:`Tensor2D`; scalar precision is
a build-wide switch (float32 by default, float64 for oracle-grade checks).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)


def default_dtype() -> np.dtype:
    """Current build-wide scalar precision."""
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Switch the build-wide scalar precision (float32 or float64)."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise ConfigError(f"unsupported scalar dtype {dt}; use float32 or float64")
    _default_dtype = dt


@contextmanager
def precision(dtype):
    """Temporarily run under a different build-wide precision."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@dataclass(frozen=True, eq=False)
class Tensor2D:
    """Immutable row-major matrix of scalars.

    The backing array is copied on construction and frozen, so tensors are
    safe to share across threads and to key computations on.
    """

    a: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.a)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor2D requires a 2-D array, got ndim={arr.ndim}")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        arr = np.ascontiguousarray(arr).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "a", arr)

    @classmethod
    def from_rows(cls, rows, dtype=None) -> "Tensor2D":
        return cls(np.array(rows, dtype=dtype or _default_dtype, ndmin=2))

    @classmethod
    def zeros(cls, rows: int, cols: int, dtype=None) -> "Tensor2D":
        return cls(np.zeros((rows, cols), dtype=dtype or _default_dtype))

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape  # type: ignore[return-value]

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries (read-only)."""
        return self.a.reshape(-1)

    @property
    def dtype(self) -> np.dtype:
        return self.a.dtype

    def row(self, i: int) -> np.ndarray:
        return self.a[i]

    def tolist(self) -> list[list[float]]:
        return self.a.tolist()

    def astype(self, dtype) -> "Tensor2D":
        return Tensor2D(self.a.astype(dtype))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor2D({self.rows}x{self.cols}, {self.a.dtype})"


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding parameters for one attention head."""

    head_dim: int
    theta_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ConfigError(f"rope head_dim must be even and >= 2, got {self.head_dim}")
        if self.theta_base <= 0:
            raise ConfigError(f"rope theta_base must be positive, got {self.theta_base}")


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Plain matrix product a @ b."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return Tensor2D(a.a @ b.a)


def log_sum_exp(row) -> float:
    """max-shifted log(sum(exp(row))); never overflows for finite inputs."""
    x = np.asarray(row, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DomainError("log_sum_exp of an empty row")
    m = float(np.max(x))
    return m + math.log(float(np.sum(np.exp(x - m))))


def softmax_rows(scores: Tensor2D, mask=None) -> Tensor2D:
    """Row-wise softmax; `mask` (True = attendable) zeroes cells exactly.

    Masked cells are skipped in both the max and the sum rather than set to
    -inf, so no NaNs can propagate out of fully-finite inputs.
    """
    z = scores.a
    if mask is None:
        m = z.max(axis=1, keepdims=True)
        p = np.exp(z - m)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != z.shape:
            raise ShapeError(f"mask shape {keep.shape} != scores shape {z.shape}")
        if not keep.any(axis=1).all():
            raise DomainError("softmax row with every cell masked")
        m = np.where(keep, z, -np.inf).max(axis=1, keepdims=True)
        p = np.zeros_like(z)
        p[keep] = np.exp((z - m)[keep])
    return Tensor2D(p / p.sum(axis=1, keepdims=True))


def rope_apply(x: Tensor2D, positions, cfg: RopeConfig) -> Tensor2D:
    """Rotate adjacent coordinate pairs of each row by its position's angles.

    Pair i of a row at position p is rotated by p * theta_base^(-2i/d).
    Angles are computed in float64 regardless of the build precision.
    """
    if x.cols != cfg.head_dim:
        raise ShapeError(f"rope input has {x.cols} cols, config head_dim {cfg.head_dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.size != x.rows:
        raise ShapeError(f"{pos.size} positions for {x.rows} rows")
    half = cfg.head_dim // 2
    inv_freq = cfg.theta_base ** (-2.0 * np.arange(half) / cfg.head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    x0, x1 = x.a[:, 0::2], x.a[:, 1::2]
    out = np.empty(x.shape, dtype=np.float64)
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos
    return Tensor2D(out.astype(x.dtype))


# splitmix64: state advances by a fixed odd constant, output is a bijective
# mix of the state. The counter form below makes the stream random-access.
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Prng:
    """Deterministic splitmix64 stream; same seed gives the same scalars everywhere.

    The i-th draw (1-based) is mix64(seed + i * 0x9E3779B97F4A7C15 mod 2^64),
    so a single instance may vectorize a block of draws and stay identical to
    drawing one value at a time.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._count = 0

    def next_u64(self) -> int:
        self._count += 1
        z = (self.seed + self._count * _GOLDEN) & _MASK64
        z ^= z >> 30
        z = (z * _MIX1) & _MASK64
        z ^= z >> 27
        z = (z * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform draw in [0, 1) with 53 significant bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def _block_u64(self, n: int) -> np.ndarray:
        counts = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self._count)
        self._count += n
        states = np.uint64(self.seed) + counts * np.uint64(_GOLDEN)
        return _mix64(states)

    def randint_below(self, n: int) -> int:
        """Uniform-ish integer in [0, n) via modulo reduction (bias < 2^-50 here)."""
        if n <= 0:
            raise DomainError(f"randint_below needs n >= 1, got {n}")
        return self.next_u64() % n

    def shuffle(self, items) -> list:
        """Fisher-Yates shuffle; returns a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint_below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def sample_sorted(self, n: int, k: int) -> list[int]:
        """k distinct values from [0, n), ascending (Floyd's algorithm)."""
        if k > n:
            raise DomainError(f"cannot sample {k} distinct values from range {n}")
        chosen: set[int] = set()
        for j in range(n - k, n):
            t = self.randint_below(j + 1)
            chosen.add(t if t not in chosen else j)
        return sorted(chosen)


def prng_fill(prng: Prng, rows: int, cols: int, scale: float) -> Tensor2D:
    """Deterministic tensor of uniforms in [-scale, scale]."""
    if scale <= 0:
        raise DomainError(f"prng_fill scale must be positive, got {scale}")
    n = rows * cols
    z = prng._block_u64(n) if n else np.empty(0, dtype=np.uint64)
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    vals = (2.0 * u - 1.0) * scale
    return Tensor2D(vals.reshape(rows, cols).astype(_default_dtype))
