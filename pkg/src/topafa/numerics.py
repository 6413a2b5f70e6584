"""Dense linear-algebra and sampling helpers shared by the rest of the package.

Everything is float64.  Random streams come from numpy's PCG64 bit generator,
which produces the same sequence for a given seed on every platform.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def l2_norm(v) -> float:
    v = as_vector(v)
    if v.size == 0:
        return 0.0
    m = float(np.max(np.abs(v)))
    if m == 0.0:
        return 0.0
    if 1e-150 < m < 1e150:
        return float(np.sqrt(np.dot(v, v)))
    # rescale so squaring neither underflows nor overflows
    w = v / m
    return m * float(np.sqrt(np.dot(w, w)))


def l1_norm(v) -> float:
    return float(np.sum(np.abs(as_vector(v))))


def row_norms(m) -> np.ndarray:
    m = as_matrix(m)
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def argsort_desc(v, axis: int = -1) -> np.ndarray:
    """Descending argsort; equal values keep ascending index order."""
    v = np.asarray(v, dtype=DTYPE)
    # stable sort on the negation keeps ties in original (ascending) order
    return np.argsort(-v, axis=axis, kind="stable")


def cumsum(v, axis: int = -1) -> np.ndarray:
    return np.cumsum(np.asarray(v, dtype=DTYPE), axis=axis)


def sample_gaussian(rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(n)


def sample_unit_sphere(rng: np.random.Generator, d: int, n: int | None = None) -> np.ndarray:
    """One point (or ``n`` rows of points) uniform on the unit sphere in R^d."""
    if d < 1:
        raise ValueError("sphere dimension must be >= 1")
    if n is None:
        g = rng.standard_normal(d)
        return g / l2_norm(g)
    g = rng.standard_normal((n, d))
    return g / row_norms(g)[:, None]
