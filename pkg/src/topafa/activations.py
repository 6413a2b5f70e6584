"""Sparsity-inducing activations: ReLU, top-k, batch top-k and top-AFA.

All functions take ReLU-ed pre-activations of shape (B, h).  A mask entry is
only ever true where the pre-activation is strictly positive, so the number of
true entries in a row always equals the L0 of the returned features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import argsort_desc

KINDS = ("relu", "topk", "batch_topk", "top_afa")
DEFAULT_KAPPA = 1e30


@dataclass
class ActivationSpec:
    kind: str = "top_afa"
    k: int | None = None
    kappa: float = DEFAULT_KAPPA
    eval_threshold: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("topk", "batch_topk"):
            if self.k is None or int(self.k) < 0:
                raise ValueError(f"{self.kind} needs a non-negative k")
            self.k = int(self.k)
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if self.eval_threshold is not None and self.eval_threshold < 0:
            raise ValueError("eval_threshold must be >= 0")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind in ("topk", "batch_topk"):
            out["k"] = self.k
        if self.kind == "top_afa":
            out["kappa"] = self.kappa
        if self.eval_threshold is not None:
            out["eval_threshold"] = self.eval_threshold
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationSpec":
        unknown = set(d) - {"kind", "k", "kappa", "eval_threshold"}
        if unknown:
            raise ValueError(f"unknown activation keys: {sorted(unknown)}")
        return cls(
            kind=d.get("kind", "top_afa"),
            k=d.get("k"),
            kappa=float(d.get("kappa", DEFAULT_KAPPA)),
            eval_threshold=d.get("eval_threshold"),
        )


@dataclass
class ActivationResult:
    f: np.ndarray
    mask: np.ndarray
    k_per_row: np.ndarray
    preacts: np.ndarray
    # per-row threshold info used by batch top-k calibration; not part of the contract
    extras: dict = field(default_factory=dict)


def _result(preacts: np.ndarray, mask: np.ndarray) -> ActivationResult:
    mask = mask & (preacts > 0)
    f = np.where(mask, preacts, 0.0)
    return ActivationResult(f=f, mask=mask, k_per_row=mask.sum(axis=1), preacts=preacts)


def _check_k(k: int, h: int):
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > h:
        raise ValueError(f"k={k} exceeds latent width h={h}")


def relu_mask(preacts) -> ActivationResult:
    p = np.asarray(preacts, dtype=np.float64)
    return _result(p, np.ones(p.shape, dtype=bool))


def topk_mask(preacts, k: int) -> ActivationResult:
    p = np.asarray(preacts, dtype=np.float64)
    B, h = p.shape
    _check_k(k, h)
    mask = np.zeros((B, h), dtype=bool)
    if k > 0:
        order = argsort_desc(p, axis=1)[:, :k]
        np.put_along_axis(mask, order, True, axis=1)
    return _result(p, mask)


def batch_topk_mask(preacts, k: int) -> ActivationResult:
    """Keep the B*k largest entries of the whole batch (ties by row, then column)."""
    p = np.asarray(preacts, dtype=np.float64)
    B, h = p.shape
    _check_k(k, h)
    flat = p.ravel()
    mask = np.zeros(flat.shape, dtype=bool)
    n_keep = B * k
    if n_keep > 0:
        mask[argsort_desc(flat)[:n_keep]] = True
    res = _result(p, mask.reshape(B, h))
    if res.mask.any():
        res.extras["min_selected"] = float(p[res.mask].min())
    return res


def threshold_mask(preacts, threshold: float) -> ActivationResult:
    """Per-example inference mode for batch top-k: keep values >= threshold."""
    p = np.asarray(preacts, dtype=np.float64)
    return _result(p, p >= threshold)


def top_afa_mask(preacts, a, dec_row_norms, kappa: float = DEFAULT_KAPPA) -> ActivationResult:
    """Adaptive per-row k: the score prefix whose norm best matches sqrt(a).

    ``a`` holds the squared norms of the centred inputs, ``dec_row_norms`` the
    l2 norms of the decoder rows.  The last cumulative score is replaced by
    ``kappa`` before the argmin, which removes the full prefix from contention
    whenever h >= 2.  All-zero rows return an empty mask (k = 0).
    """
    p = np.asarray(preacts, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    norms = np.asarray(dec_row_norms, dtype=np.float64).reshape(-1)
    B, h = p.shape
    if a.shape[0] != B or norms.shape[0] != h:
        raise ValueError("top_afa_mask: a must have B entries and dec_row_norms h entries")
    mask = np.zeros((B, h), dtype=bool)
    if h == 0 or B == 0:
        return _result(p, mask)
    s = (p * norms) ** 2
    order = argsort_desc(s, axis=1)
    c = np.cumsum(np.take_along_axis(s, order, axis=1), axis=1)
    c[:, -1] = kappa
    # argmin returns the first minimiser, i.e. the sparser prefix on ties
    k = np.argmin(np.abs(np.sqrt(c) - np.sqrt(a)[:, None]), axis=1) + 1
    keep_sorted = np.arange(h)[None, :] < k[:, None]
    np.put_along_axis(mask, order, keep_sorted, axis=1)
    return _result(p, mask)


def top_afa_oracle(preacts_row, dec_row_norms, a: float) -> int:
    """Exhaustive prefix scan used to cross-check :func:`top_afa_mask`.

    Plain-Python loops over a comparison sort; returns 0 for an all-zero row.
    """
    vals = [float(x) for x in preacts_row]
    norms = [float(x) for x in dec_row_norms]
    h = len(vals)
    if not any(v > 0 for v in vals):
        return 0
    scores = [(v * n) ** 2 for v, n in zip(vals, norms)]
    ranked = sorted(range(h), key=lambda i: (-scores[i], i))
    target = math.sqrt(a)
    # the full prefix is only eligible when it is the only prefix
    candidates = range(1, h) if h >= 2 else range(1, 2)
    best_k, best_gap = None, math.inf
    total = 0.0
    for k in range(1, h + 1):
        total += scores[ranked[k - 1]]
        if k not in candidates:
            continue
        gap = abs(math.sqrt(total) - target)
        if gap < best_gap:
            best_k, best_gap = k, gap
    return best_k


def apply_activation(spec: ActivationSpec, preacts, a=None, dec_row_norms=None,
                     use_threshold: bool = False) -> ActivationResult:
    if spec.kind == "relu":
        return relu_mask(preacts)
    if spec.kind == "topk":
        return topk_mask(preacts, spec.k)
    if spec.kind == "batch_topk":
        if use_threshold and spec.eval_threshold is not None:
            return threshold_mask(preacts, spec.eval_threshold)
        return batch_topk_mask(preacts, spec.k)
    if a is None or dec_row_norms is None:
        raise ValueError("top_afa needs the centred squared norms and decoder row norms")
    return top_afa_mask(preacts, a, dec_row_norms, spec.kappa)
