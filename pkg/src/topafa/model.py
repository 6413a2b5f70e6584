"""SAE parameters and the encode / activate / decode forward pass.

Shapes follow the row-vector convention: inputs are (B, d), the encoder is
(d, h), the decoder is (h, d) with one dictionary direction per row.  Both
biases live in input space: ``b_enc`` is subtracted before encoding and
``b_dec`` is added after decoding.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .activations import ActivationResult, ActivationSpec, apply_activation
from .numerics import as_matrix, row_norms, sample_unit_sphere

FIELDS = ("W_enc", "b_enc", "W_dec", "b_dec")


@dataclass
class SaeParams:
    W_enc: np.ndarray
    b_enc: np.ndarray
    W_dec: np.ndarray
    b_dec: np.ndarray

    def __post_init__(self):
        self.W_enc = np.ascontiguousarray(self.W_enc, dtype=np.float64)
        self.b_enc = np.ascontiguousarray(self.b_enc, dtype=np.float64)
        self.W_dec = np.ascontiguousarray(self.W_dec, dtype=np.float64)
        self.b_dec = np.ascontiguousarray(self.b_dec, dtype=np.float64)
        d, h = self.W_enc.shape
        if self.W_dec.shape != (h, d) or self.b_enc.shape != (d,) or self.b_dec.shape != (d,):
            raise ValueError(
                f"inconsistent SAE shapes: W_enc {self.W_enc.shape}, b_enc {self.b_enc.shape}, "
                f"W_dec {self.W_dec.shape}, b_dec {self.b_dec.shape}"
            )
        for name in FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def d(self) -> int:
        return self.W_enc.shape[0]

    @property
    def h(self) -> int:
        return self.W_enc.shape[1]

    def dec_row_norms(self) -> np.ndarray:
        return row_norms(self.W_dec)

    def copy(self) -> "SaeParams":
        return SaeParams(*(getattr(self, n).copy() for n in FIELDS))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in FIELDS}

    @classmethod
    def zeros(cls, d: int, h: int) -> "SaeParams":
        return cls(np.zeros((d, h)), np.zeros(d), np.zeros((h, d)), np.zeros(d))


@dataclass
class EmbeddingBatch:
    rows: np.ndarray
    source_tag: str = ""

    def __post_init__(self):
        self.rows = as_matrix(self.rows)
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding batch contains non-finite values")

    @property
    def B(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


def _rows(batch) -> np.ndarray:
    if isinstance(batch, EmbeddingBatch):
        return batch.rows
    return as_matrix(batch)


def init_params(rng: np.random.Generator, d: int, h: int, scheme: str = "tied_sphere") -> SaeParams:
    """Decoder rows uniform on the unit sphere, encoder = decoder transpose, zero biases."""
    if d < 1 or h < 1:
        raise ValueError(f"SAE dimensions must be positive, got d={d}, h={h}")
    if scheme != "tied_sphere":
        raise ValueError(f"unknown init scheme {scheme!r}")
    if h < d:
        warnings.warn(f"h={h} < d={d}: dictionary is undercomplete", stacklevel=2)
    W_dec = sample_unit_sphere(rng, d, n=h)
    return SaeParams(W_dec.T.copy(), np.zeros(d), W_dec, np.zeros(d))


def encode(params: SaeParams, batch):
    """Return (ReLU pre-activations, centred inputs, squared centred norms)."""
    z = _rows(batch)
    if z.shape[1] != params.d:
        raise ValueError(f"input dimension {z.shape[1]} does not match model d={params.d}")
    z_cent = z - params.b_enc
    preacts = np.maximum(z_cent @ params.W_enc, 0.0)
    a = np.einsum("ij,ij->i", z_cent, z_cent)
    return preacts, z_cent, a


def decode(params: SaeParams, f) -> np.ndarray:
    f = as_matrix(f)
    if f.shape[1] != params.h:
        raise ValueError(f"feature width {f.shape[1]} does not match model h={params.h}")
    return f @ params.W_dec + params.b_dec


def forward(params: SaeParams, batch, spec: ActivationSpec,
            use_threshold: bool = False) -> tuple[ActivationResult, np.ndarray]:
    preacts, _, a = encode(params, batch)
    act = apply_activation(spec, preacts, a=a, dec_row_norms=params.dec_row_norms(),
                           use_threshold=use_threshold)
    return act, decode(params, act.f)
