"""Dense 64-bit linear algebra helpers, seeded random streams and the Gaussian tail.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
Randomness comes from :class:`RngStream`, a Philox counter-based generator
keyed by ``(seed, stream_id)`` so that any stream can be recreated without
replaying the others.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from phylearn.errors import InvalidParameterError, ShapeError

__all__ = [
    "RngStream",
    "affine",
    "as_matrix",
    "as_vector",
    "gaussian_vector",
    "matmul",
    "q_function",
]

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    Two instances built from the same pair produce the same sequence.
    Instances are single-owner; hand each worker its own stream id.

    Examples
    --------
    >>> a = RngStream(7, 0).normal(3)
    >>> b = RngStream(7, 0).normal(3)
    >>> bool((a == b).all())
    True
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def substream(self, index: int) -> "RngStream":
        """Return an independent stream derived from this one and ``index``."""
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(int(index) + 1)))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(size) * scale

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, high: int, size) -> np.ndarray:
        return self.generator.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise InvalidParameterError(f"{name} has non-finite entries")
    return m


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Validate ``v`` as a finite 1-D float64 array."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise InvalidParameterError(f"{name} has non-finite entries")
    return x


def gaussian_vector(dim: int, variance: float, rng: RngStream) -> np.ndarray:
    """Draw one sample of N(0, variance * I) in ``dim`` dimensions."""
    if variance < 0 or not math.isfinite(variance):
        raise InvalidParameterError(f"variance must be finite and >= 0, got {variance}")
    if dim < 1:
        raise InvalidParameterError(f"dim must be >= 1, got {dim}")
    return rng.normal(dim, math.sqrt(variance))


def q_function(x):
    """Standard normal tail probability P(Z > x).

    Accepts scalars or arrays. Uses the complementary error function, which
    keeps full relative precision deep into the tail.
    """
    return 0.5 * special.erfc(np.asarray(x, dtype=np.float64) / math.sqrt(2.0))[()]


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def affine(w, x, b) -> np.ndarray:
    """Return ``w @ x + b`` for a vector ``x`` (or a column-stacked batch)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.ndim != 2 or x.shape[0] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(
            f"affine shapes do not conform: W {w.shape}, x {x.shape}, b {b.shape}"
        )
    out = w @ x
    return out + (b if x.ndim == 1 else b[:, None])
