"""Quasi-orthogonality and norm-matching diagnostics for SAE dictionaries.

``f_eff`` throughout means feature activations multiplied by the norm of the
corresponding decoder row, which is the equivalent decomposition over a
unit-norm dictionary.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .activations import ActivationSpec, apply_activation
from .model import SaeParams, encode

# relative slack applied at interval endpoints when testing containment
ENDPOINT_RTOL = 1e-9


@dataclass
class AfaInterval:
    lo: float
    hi: float

    def contains(self, x: float, rtol: float = ENDPOINT_RTOL) -> bool:
        return self.lo * (1 - rtol) <= x <= self.hi * (1 + rtol)


@dataclass
class IntInterval:
    lo: int
    hi: int | None  # None: unbounded above

    @property
    def empty(self) -> bool:
        return self.hi is not None and self.lo > self.hi

    def __contains__(self, n: int) -> bool:
        return n >= self.lo and (self.hi is None or n <= self.hi)


def _unit_rows(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    n = np.sqrt(np.einsum("ij,ij->i", W, W))
    zero = np.flatnonzero(n == 0)
    if zero.size:
        raise ValueError(f"dictionary row {int(zero[0])} has zero norm")
    return W / n[:, None]


def epsilon_dict(W_dec, block: int = 1024, sample_pairs: int | None = None,
                 rng: np.random.Generator | None = None) -> float:
    """Largest |cosine| between distinct dictionary rows.

    Exact blocked O(h^2 d) scan by default.  ``sample_pairs`` switches to a
    Monte-Carlo estimate over random pairs (a lower estimate of the true max),
    meant for very wide dictionaries.
    """
    U = _unit_rows(W_dec)
    h = U.shape[0]
    if h < 2:
        return 0.0
    if sample_pairs:
        if rng is None:
            raise ValueError("sample_pairs requires an rng")
        i = rng.integers(0, h, sample_pairs)
        j = (i + rng.integers(1, h, sample_pairs)) % h
        return float(min(1.0, np.max(np.abs(np.einsum("ij,ij->i", U[i], U[j])))))
    best = 0.0
    for start in range(0, h, block):
        stop = min(start + block, h)
        g = np.abs(U[start:stop] @ U.T)
        g[np.arange(stop - start), np.arange(start, stop)] = 0.0
        best = max(best, float(g.max()))
    return min(best, 1.0)


def epsilon_jl(h: int, d: int) -> float:
    if h < 1 or d < 1:
        raise ValueError("h and d must be >= 1")
    return math.sqrt(20.0 * math.log(h) / d)


def epsilon_lbo(z_cent, f_eff, h: int) -> np.ndarray:
    """Per-input lower bound on dictionary quasi-orthogonality.

    Inputs whose feature norm is zero get NaN (undefined).
    """
    if h < 2:
        raise ValueError("epsilon_lbo needs h >= 2")
    z = np.atleast_2d(np.asarray(z_cent, dtype=np.float64))
    f = np.atleast_2d(np.asarray(f_eff, dtype=np.float64))
    z_sq = np.einsum("ij,ij->i", z, z)
    f_sq = np.einsum("ij,ij->i", f, f)
    out = np.full(z_sq.shape, np.nan)
    ok = f_sq > 0
    out[ok] = np.abs(z_sq[ok] - f_sq[ok]) / ((h - 1) * f_sq[ok])
    return out


def afa_bounds(z_sq_norm, epsilon: float, h: int):
    """Vectorised interval endpoints for ||f||^2 given ||z||^2."""
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    z_sq = np.asarray(z_sq_norm, dtype=np.float64)
    spread = epsilon * (h - 1)
    lo = z_sq / (1.0 + spread)
    if spread >= 1.0:
        hi = np.full_like(z_sq, np.inf)
    else:
        hi = z_sq / (1.0 - spread)
    return lo, hi


def afa_interval(z_sq_norm: float, epsilon: float, h: int) -> AfaInterval:
    lo, hi = afa_bounds(z_sq_norm, epsilon, h)
    return AfaInterval(float(lo), float(hi))


def binary_feature_count_bound(z_sq_norm: float, epsilon: float, h: int) -> IntInterval:
    """Integer range for the number of active features of a binary code."""
    iv = afa_interval(z_sq_norm, epsilon, h)
    lo = math.ceil(iv.lo * (1 - ENDPOINT_RTOL))
    hi = None if math.isinf(iv.hi) else math.floor(iv.hi * (1 + ENDPOINT_RTOL))
    return IntInterval(lo, hi)


def nmse(z, z_hat) -> float:
    """Sum of squared errors over the error of predicting the batch mean."""
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    if z.shape[0] < 2:
        raise ValueError("nmse needs at least 2 rows")
    den = float(np.sum((z - z.mean(axis=0)) ** 2))
    if den == 0.0:
        return math.nan
    return float(np.sum((z - z_hat) ** 2)) / den


def nmse_per_sample(z, z_hat) -> np.ndarray:
    """Per-input squared error over the mean per-input variance; averages to :func:`nmse`."""
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    den = float(np.mean(np.sum((z - z.mean(axis=0)) ** 2, axis=1)))
    if den == 0.0:
        return np.full(z.shape[0], np.nan)
    return np.sum((z - z_hat) ** 2, axis=1) / den


def zf_export(z_norms, f_norms, epsilon: float, h: int) -> list[tuple[float, float, float, float]]:
    """Rows of (z_norm, f_norm, bound_lo, bound_hi) for a ZF scatter."""
    z = np.asarray(z_norms, dtype=np.float64).reshape(-1)
    f = np.asarray(f_norms, dtype=np.float64).reshape(-1)
    lo, hi = afa_bounds(z ** 2, epsilon, h)
    return [(float(a), float(b), float(c), float(e))
            for a, b, c, e in zip(z, f, np.sqrt(lo), np.sqrt(hi))]


@dataclass
class ViolinSummary:
    min: float
    p25: float
    median: float
    p75: float
    max: float
    mean: float
    n_kept: int
    bin_edges: list[float]
    counts: list[int]

    def stats(self) -> dict:
        return {k: getattr(self, k) for k in ("min", "p25", "median", "p75", "max", "mean", "n_kept")}


def violin_summary(values, trim: float = 0.005, bins: int = 64) -> ViolinSummary:
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("violin_summary needs at least one value")
    if not np.all(np.isfinite(v)):
        raise ValueError("violin_summary values must be finite")
    cut = int(math.floor(v.size * trim))
    if cut and v.size - 2 * cut >= 1:
        v = v[cut:v.size - cut]
    q = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    counts, edges = np.histogram(v, bins=bins, range=(v[0], v[-1]) if v[-1] > v[0] else (v[0] - 0.5, v[0] + 0.5))
    return ViolinSummary(float(v[0]), float(q[0]), float(q[1]), float(q[2]), float(v[-1]),
                         float(v.mean()), int(v.size), edges.tolist(), counts.tolist())


@dataclass
class MetricsReport:
    epsilon_dict: float
    epsilon_jl: float
    epsilon_lbo: list[float]
    nmse: float
    l0_mean: float
    afa_bound_violations: int
    zf_points: list[tuple[float, float]]
    epsilon_lbo_undefined: int = 0
    n_inputs: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["epsilon_lbo"] = [None if math.isnan(x) else x for x in self.epsilon_lbo]
        out["nmse"] = None if math.isnan(self.nmse) else self.nmse
        return out


@dataclass
class EvalArrays:
    """Per-input quantities behind a :class:`MetricsReport`."""
    z_cent_norm: np.ndarray
    f_eff_norm: np.ndarray
    epsilon_lbo: np.ndarray
    nmse_per_sample: np.ndarray
    l0: np.ndarray


def evaluate(params: SaeParams, spec: ActivationSpec, batches, use_threshold: bool = True,
             epsilon_block: int = 1024):
    """Run the SAE over ``batches`` and collect every diagnostic.

    Returns ``(MetricsReport, EvalArrays)``.  AFA bound violations count inputs
    whose ||f_eff||^2 falls outside the Theorem interval built from the
    dictionary's own epsilon.
    """
    eps = epsilon_dict(params.W_dec, block=epsilon_block)
    norms = params.dec_row_norms()
    zs, zhats, zc_n, fe_n, lbo, l0 = [], [], [], [], [], []
    for batch in batches:
        rows = getattr(batch, "rows", batch)
        preacts, z_cent, a = encode(params, rows)
        act = apply_activation(spec, preacts, a=a, dec_row_norms=norms, use_threshold=use_threshold)
        z_hat = act.f @ params.W_dec + params.b_dec
        f_eff = act.f * norms
        zs.append(np.asarray(rows, dtype=np.float64))
        zhats.append(z_hat)
        zc_n.append(np.sqrt(a))
        fe_n.append(np.sqrt(np.einsum("ij,ij->i", f_eff, f_eff)))
        lbo.append(epsilon_lbo(z_cent, f_eff, params.h) if params.h >= 2 else np.full(len(a), np.nan))
        l0.append(act.k_per_row)
    if not zs:
        raise ValueError("no inputs to evaluate")
    z = np.concatenate(zs)
    z_hat = np.concatenate(zhats)
    zc_n = np.concatenate(zc_n)
    fe_n = np.concatenate(fe_n)
    lbo = np.concatenate(lbo)
    l0 = np.concatenate(l0)

    lo, hi = afa_bounds(zc_n ** 2, eps if eps < 1 else np.nextafter(1.0, 0.0), params.h)
    f_sq = fe_n ** 2
    inside = (f_sq >= lo * (1 - ENDPOINT_RTOL)) & (f_sq <= hi * (1 + ENDPOINT_RTOL))
    total_nmse = nmse(z, z_hat) if z.shape[0] >= 2 else math.nan
    report = MetricsReport(
        epsilon_dict=eps,
        epsilon_jl=epsilon_jl(params.h, params.d),
        epsilon_lbo=lbo.tolist(),
        nmse=total_nmse,
        l0_mean=float(l0.mean()),
        afa_bound_violations=int((~inside).sum()),
        zf_points=list(zip(zc_n.tolist(), fe_n.tolist())),
        epsilon_lbo_undefined=int(np.isnan(lbo).sum()),
        n_inputs=int(z.shape[0]),
    )
    per = nmse_per_sample(z, z_hat) if z.shape[0] >= 2 else np.full(z.shape[0], np.nan)
    return report, EvalArrays(zc_n, fe_n, lbo, per, l0)
