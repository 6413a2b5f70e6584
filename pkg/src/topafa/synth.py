"""Synthetic superposition data with a known dictionary and known sparse codes."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .metrics import epsilon_dict
from .numerics import make_rng, sample_unit_sphere

COEFF_DISTS = ("uniform", "binary")
UNIFORM_RANGE = (0.1, 1.0)


@dataclass
class SynthSpec:
    d: int = 64
    h: int | None = None
    k0: int = 8
    coeff_dist: str = "uniform"
    noise_sigma: float = 0.0
    n_samples: int = 50000
    seed: int = 0
    expansion_factor: int = 16
    orthogonal: bool = False

    def __post_init__(self):
        if self.h is None:
            self.h = self.expansion_factor * self.d
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if not 1 <= self.k0 <= self.h:
            raise ValueError(f"k0 must lie in [1, h={self.h}], got {self.k0}")
        if self.coeff_dist not in COEFF_DISTS:
            raise ValueError(f"coeff_dist must be one of {COEFF_DISTS}")
        if self.noise_sigma < 0 or self.n_samples < 0:
            raise ValueError("noise_sigma and n_samples must be >= 0")
        if self.h <= self.d and not self.orthogonal:
            warnings.warn(f"h={self.h} <= d={self.d}: no superposition", stacklevel=2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SparseCodes:
    """Fixed-support codes: row i has ``indices[i]`` active with ``values[i]``."""
    indices: np.ndarray  # (n, k0) int64
    values: np.ndarray   # (n, k0) float64
    h: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    def to_dense(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        idx = self.indices[start:stop]
        out = np.zeros((idx.shape[0], self.h))
        np.put_along_axis(out, idx, self.values[start:stop], axis=1)
        return out

    def sq_norms(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.values, self.values)

    def counts(self) -> np.ndarray:
        return np.count_nonzero(self.values, axis=1)


@dataclass
class SynthGroundTruth:
    D: np.ndarray
    true_epsilon: float
    codes: SparseCodes
    embeddings: np.ndarray
    spec: SynthSpec

    def metadata(self) -> dict:
        s = self.spec
        return {"d": s.d, "h": s.h, "k0": s.k0, "true_epsilon": self.true_epsilon,
                "noise_sigma": s.noise_sigma, "seed": s.seed, "coeff_dist": s.coeff_dist,
                "n_samples": s.n_samples, "orthogonal": s.orthogonal}


def gen_dictionary(rng: np.random.Generator, d: int, h: int, orthogonal: bool = False):
    """Return (D, epsilon) with ``h`` unit-norm rows in R^d.

    ``orthogonal`` (requires h <= d) picks signed standard basis vectors in
    random order, which are exactly orthogonal (epsilon 0).
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    if orthogonal:
        if h > d:
            raise ValueError(f"cannot orthogonalise h={h} rows in d={d} dimensions")
        D = np.zeros((h, d))
        D[np.arange(h), rng.permutation(d)[:h]] = rng.choice([-1.0, 1.0], size=h)
        return D, epsilon_dict(D)
    D = sample_unit_sphere(rng, d, n=h)
    return D, epsilon_dict(D)


def gen_codes(rng: np.random.Generator, spec: SynthSpec, chunk: int = 4096) -> SparseCodes:
    """Uniform random supports of size k0 (without replacement) with non-negative values."""
    n, h, k0 = spec.n_samples, spec.h, spec.k0
    indices = np.empty((n, k0), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        keys = rng.random((stop - start, h))
        indices[start:stop] = np.argpartition(keys, k0 - 1, axis=1)[:, :k0]
    indices.sort(axis=1)
    if spec.coeff_dist == "binary":
        values = np.ones((n, k0))
    else:
        values = rng.uniform(*UNIFORM_RANGE, size=(n, k0))
    return SparseCodes(indices, values, h)


def embed(codes: SparseCodes, D: np.ndarray, chunk: int = 4096) -> np.ndarray:
    n = len(codes)
    out = np.empty((n, D.shape[1]))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        out[start:stop] = np.einsum("nk,nkd->nd", codes.values[start:stop], D[codes.indices[start:stop]])
    return out


def gen_dataset(spec: SynthSpec) -> SynthGroundTruth:
    rng = make_rng(spec.seed)
    D, eps = gen_dictionary(rng, spec.d, spec.h, orthogonal=spec.orthogonal)
    codes = gen_codes(rng, spec)
    z = embed(codes, D)
    if spec.noise_sigma > 0:
        z = z + rng.normal(0.0, spec.noise_sigma, size=z.shape)
    return SynthGroundTruth(D, eps, codes, z, spec)
