"""Dense float64 primitives, stable log-domain reductions, and a splittable RNG.

Every other module draws randomness and does its linear algebra through the
helpers here, so a single seed pins the whole pipeline. Arrays are plain numpy
float64 ndarrays; the functions add the shape checking the callers rely on.
"""

from __future__ import annotations

import zlib

import numpy as np

Array = np.ndarray


def as_vec(x) -> Array:
    """Coerce to a 1-d float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_mat(x) -> Array:
    """Coerce to a 2-d float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def dot(u, v) -> float:
    """Inner product of two equal-length vectors."""
    u = as_vec(u)
    v = as_vec(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(u @ v)


def log_sum_exp(xs, axis: int | None = None):
    """log(sum(exp(xs))) computed with a max shift so large inputs never overflow.

    With ``axis=None`` reduces everything to a scalar; otherwise reduces along
    the given axis and returns an array.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if axis is None:
        m = np.max(xs)
        if not np.isfinite(m):
            # all -inf, or an inf present; the shifted sum would be nan
            return float(m)
        return float(m + np.log(np.sum(np.exp(xs - m))))
    m = np.max(xs, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(xs - m), axis=axis))
    return out


def relu(v) -> Array:
    """Elementwise max(0, x), any shape."""
    return np.maximum(np.asarray(v, dtype=np.float64), 0.0)


def matmul(a, b) -> Array:
    """Matrix product with an explicit inner-dimension check."""
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} @ {b.shape}")
    return a @ b


class Rng:
    """Deterministic, splittable random source (Philox counter-based).

    ``split(key)`` derives a child stream identified by the (seed, path) pair;
    the child is independent of how much the parent has drawn, so adding draws
    in one consumer never perturbs another. The same seed and split path always
    reproduce the same stream.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in _path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key: int | str) -> "Rng":
        """Child stream for the given purpose key (int or stable-hashed str)."""
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        if key < 0:
            raise ValueError("split key must be non-negative")
        return Rng(self.seed, self.path + (int(key),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
