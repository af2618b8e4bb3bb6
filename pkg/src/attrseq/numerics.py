"""Dense vector/matrix kernels and the seeded random generator.

Vectors are 1-D float64 numpy arrays, matrices are 2-D row-major float64
arrays. Everything here is a pure function over its inputs; all arithmetic
is double precision so that finite-difference gradient checks downstream
can resolve relative errors well below 1e-4.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

Array = np.ndarray


def as_vector(x, name: str = "vector") -> Array:
    """Coerce to a 1-D float64 array, rejecting non-finite entries."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError(f"{name}: expected 1-D array, got shape {v.shape}")
    require_finite(v, name)
    return v


def as_matrix(x, name: str = "matrix") -> Array:
    """Coerce to a 2-D row-major float64 array, rejecting non-finite entries."""
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"{name}: expected 2-D array, got shape {m.shape}")
    require_finite(m, name)
    return m


def require_finite(arr: Array, name: str = "array") -> None:
    if not np.isfinite(arr).all():
        raise ContractError(f"{name}: contains NaN or Inf")


def matvec(m: Array, v: Array) -> Array:
    """Matrix-vector product with an explicit dimension check."""
    if m.ndim != 2 or v.ndim != 1:
        raise ContractError(f"matvec: need 2-D and 1-D operands, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ContractError(f"matvec: {m.shape} is incompatible with vector of length {v.shape[0]}")
    return m @ v


def sigmoid(v: Array) -> Array:
    """Logistic sigmoid; inputs are clamped at +-60 so exp can never overflow.

    sigmoid(60) already rounds to within one ulp of the saturated value, so
    the clamp is invisible at double precision while keeping outputs strictly
    inside (0, 1) for arbitrarily large finite inputs.
    """
    v = np.asarray(v, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-np.clip(v, -60.0, 60.0)))


def tanh(v: Array) -> Array:
    return np.tanh(np.asarray(v, dtype=np.float64))


def hadamard(a: Array, b: Array) -> Array:
    """Elementwise product of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def softmax(v: Array) -> Array:
    """Numerically stable softmax (max-subtraction is unconditional)."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax(v: Array) -> Array:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


class Rng:
    """Seeded deterministic generator; one owner per instance.

    Same seed gives the identical draw stream on a platform, which backs
    every reproducibility guarantee in the package (data generation,
    parameter init, shuffling, dropout masks).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)
