"""Losses, analytic gradients, Adam and the training loop.

Selection masks (top-k, batch top-k, top-AFA, and the auxiliary top-k over
dead latents) are treated as constants when differentiating.  The residual
fed to the auxiliary loss is detached from the main reconstruction path.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Iterator

import numpy as np

from .activations import ActivationResult, ActivationSpec, apply_activation, topk_mask
from .model import FIELDS, EmbeddingBatch, SaeParams, init_params
from .numerics import make_rng, row_norms

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "loss_total", "loss_mse", "loss_aux", "loss_afa", "nmse", "mean_l0", "dead_count")


class NumericalAbort(RuntimeError):
    """Raised when a loss or parameter turns NaN/Inf during training."""


@dataclass
class TrainConfig:
    lambda_afa: float = 1 / 16
    alpha_aux: float = 1 / 32
    lambda_sparsity: float = 0.0
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4096
    iterations: int = 20000
    k_aux: int | None = None
    dead_window: int = 256
    unit_norm_decoder: bool = False
    afa_raw_f: bool = False
    tie_pre_bias: bool = False
    expansion_factor: int = 16
    h: int | None = None
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_afa", "alpha_aux", "lambda_sparsity", "lr", "adam_eps"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("adam_beta1", "adam_beta2"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if self.batch_size < 1 or self.iterations < 0 or self.dead_window < 0:
            raise ValueError("batch_size must be >= 1; iterations, dead_window >= 0")
        if self.expansion_factor < 1:
            raise ValueError("expansion_factor must be >= 1")

    def latent_dim(self, d: int) -> int:
        return self.h if self.h is not None else self.expansion_factor * d

    def to_dict(self) -> dict:
        return asdict(self)


class DeadLatentTracker:
    """A latent is dead once it has been silent for more than ``window`` batches."""

    def __init__(self, h: int, window: int):
        self.last_active = np.zeros(h, dtype=np.int64)
        self.window = window

    def update(self, batch_index: int, active) -> None:
        self.last_active[np.asarray(active, dtype=bool)] = batch_index

    def dead_mask(self, batch_index: int) -> np.ndarray:
        return (batch_index - self.last_active) > self.window


# -- losses -----------------------------------------------------------------

def _sq_row_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def loss_reconstruction(z, z_hat) -> float:
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_hat.shape}")
    return float(np.mean(_sq_row_norms(z - z_hat)))


def loss_afa(f_masked, dec_row_norms, z_cent) -> float:
    f_eff = np.asarray(f_masked, dtype=np.float64) * np.asarray(dec_row_norms, dtype=np.float64)
    z_cent = np.asarray(z_cent, dtype=np.float64)
    gap = np.sqrt(_sq_row_norms(f_eff)) - np.sqrt(_sq_row_norms(z_cent))
    return float(np.mean(gap ** 2))


def _aux_selection(preacts: np.ndarray, dead_mask, k_aux: int) -> ActivationResult | None:
    if dead_mask is None or not np.any(dead_mask):
        return None
    k = min(int(k_aux), int(np.count_nonzero(dead_mask)))
    return topk_mask(np.where(dead_mask, preacts, 0.0), k)


def loss_aux(residual, preacts, dead_mask, params: SaeParams, k_aux: int) -> float:
    """Reconstruct the (detached) residual from the top ``k_aux`` dead latents only."""
    sel = _aux_selection(np.asarray(preacts, dtype=np.float64), dead_mask, k_aux)
    if sel is None:
        return 0.0
    return loss_reconstruction(residual, sel.f @ params.W_dec)


# -- forward pass with everything the gradient needs --------------------------

@dataclass
class ForwardPass:
    z: np.ndarray
    z_cent: np.ndarray
    pre: np.ndarray
    preacts: np.ndarray
    a: np.ndarray
    norms: np.ndarray
    act: ActivationResult
    z_hat: np.ndarray
    weights: np.ndarray
    aux: ActivationResult | None
    residual: np.ndarray | None
    losses: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.losses["loss_total"]


def run_forward(batch, params: SaeParams, spec: ActivationSpec, config: TrainConfig,
                dead_mask=None, mask=None, aux_mask=None, aux_residual=None) -> ForwardPass:
    """Forward pass plus all loss terms.

    ``mask``/``aux_mask`` pin the selections (as the gradient does), and
    ``aux_residual`` pins the detached residual; finite-difference checks rely
    on all three.
    """
    z = batch.rows if isinstance(batch, EmbeddingBatch) else np.asarray(batch, dtype=np.float64)
    if z.shape[1] != params.d:
        raise ValueError(f"input dimension {z.shape[1]} does not match model d={params.d}")
    z_cent = z - params.b_enc
    pre = z_cent @ params.W_enc
    preacts = np.maximum(pre, 0.0)
    a = _sq_row_norms(z_cent)
    norms = row_norms(params.W_dec)
    if mask is None:
        act = apply_activation(spec, preacts, a=a, dec_row_norms=norms)
    else:
        m = np.asarray(mask, dtype=bool) & (preacts > 0)
        act = ActivationResult(np.where(m, preacts, 0.0), m, m.sum(axis=1), preacts)
    z_hat = act.f @ params.W_dec + params.b_dec
    weights = np.ones_like(norms) if config.afa_raw_f else norms

    losses = {"loss_mse": float(np.mean(_sq_row_norms(z - z_hat)))}
    losses["loss_afa"] = loss_afa(act.f, weights, z_cent)
    losses["loss_sparsity"] = float(np.mean(act.f.sum(axis=1)))

    k_aux = config.k_aux if config.k_aux is not None else params.d
    if aux_mask is not None:
        m = np.asarray(aux_mask, dtype=bool) & (preacts > 0)
        aux = ActivationResult(np.where(m, preacts, 0.0), m, m.sum(axis=1), preacts)
    else:
        aux = _aux_selection(preacts, dead_mask, k_aux)
    residual = None
    if aux is not None:
        residual = (z - z_hat) if aux_residual is None else np.asarray(aux_residual, dtype=np.float64)
        losses["loss_aux"] = loss_reconstruction(residual, aux.f @ params.W_dec)
    else:
        losses["loss_aux"] = 0.0

    losses["loss_total"] = (losses["loss_mse"]
                            + config.lambda_sparsity * losses["loss_sparsity"]
                            + config.alpha_aux * losses["loss_aux"]
                            + config.lambda_afa * losses["loss_afa"])
    return ForwardPass(z, z_cent, pre, preacts, a, norms, act, z_hat, weights, aux, residual, losses)


def total_loss(batch, params: SaeParams, spec: ActivationSpec, config: TrainConfig,
               **pins) -> tuple[float, dict]:
    fp = run_forward(batch, params, spec, config, **pins)
    return fp.total, dict(fp.losses)


def backward(batch, params: SaeParams, spec: ActivationSpec, config: TrainConfig,
             fp: ForwardPass | None = None, **pins) -> tuple[dict[str, np.ndarray], ForwardPass]:
    """Analytic gradients of the total loss w.r.t. W_enc, b_enc, W_dec, b_dec."""
    if fp is None:
        fp = run_forward(batch, params, spec, config, **pins)
    B = fp.z.shape[0]
    W_dec = params.W_dec
    mask = fp.act.mask
    f = fp.act.f

    # reconstruction
    g_zhat = (2.0 / B) * (fp.z_hat - fp.z)
    g_b_dec = g_zhat.sum(axis=0)
    g_W_dec = f.T @ g_zhat
    g_f = g_zhat @ W_dec.T
    g_zcent = np.zeros_like(fp.z_cent)

    if config.lambda_sparsity:
        g_f = g_f + (config.lambda_sparsity / B) * (f > 0)

    if config.lambda_afa:
        f_eff = f * fp.weights
        f_norm = np.sqrt(_sq_row_norms(f_eff))
        z_norm = np.sqrt(fp.a)
        gap = f_norm - z_norm
        coef_f = np.divide(2.0 * gap, B * f_norm, out=np.zeros_like(gap), where=f_norm > 0)
        g_feff = config.lambda_afa * coef_f[:, None] * f_eff
        g_f = g_f + g_feff * fp.weights
        if not config.afa_raw_f:
            g_norms = np.einsum("ij,ij->j", g_feff, f)
            scale = np.divide(g_norms, fp.norms, out=np.zeros_like(g_norms), where=fp.norms > 0)
            g_W_dec = g_W_dec + scale[:, None] * W_dec
        coef_z = np.divide(-2.0 * gap, B * z_norm, out=np.zeros_like(gap), where=z_norm > 0)
        g_zcent = g_zcent + config.lambda_afa * coef_z[:, None] * fp.z_cent

    g_p = g_f * mask
    if fp.aux is not None and config.alpha_aux:
        e_hat = fp.aux.f @ W_dec
        g_ehat = (2.0 * config.alpha_aux / B) * (e_hat - fp.residual)
        g_W_dec = g_W_dec + fp.aux.f.T @ g_ehat
        g_p = g_p + (g_ehat @ W_dec.T) * fp.aux.mask

    # ReLU derivative is 0 at exactly 0
    g_pre = g_p * (fp.pre > 0)
    g_W_enc = fp.z_cent.T @ g_pre
    g_zcent = g_zcent + g_pre @ params.W_enc.T
    g_b_enc = -g_zcent.sum(axis=0)

    if config.tie_pre_bias:
        g_b_enc = g_b_dec = g_b_enc + g_b_dec
    grads = {"W_enc": g_W_enc, "b_enc": g_b_enc, "W_dec": g_W_dec, "b_dec": g_b_dec.copy()}
    return grads, fp


# -- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_update(arrays: dict, grads: dict, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam step on a dict of arrays; returns new arrays."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = {}
    for name, x in arrays.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = x - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def adam_step(params: SaeParams, grads: dict, state: AdamState, config: TrainConfig) -> SaeParams:
    grads = dict(grads)
    if config.unit_norm_decoder:
        W = params.W_dec
        g = grads["W_dec"]
        sq = np.einsum("ij,ij->i", W, W)
        par = np.divide(np.einsum("ij,ij->i", g, W), sq, out=np.zeros_like(sq), where=sq > 0)
        grads["W_dec"] = g - par[:, None] * W
    new = adam_update(params.arrays(), grads, state, config.lr,
                      config.adam_beta1, config.adam_beta2, config.adam_eps)
    if config.unit_norm_decoder:
        n = row_norms(new["W_dec"])
        new["W_dec"] = new["W_dec"] / np.where(n > 0, n, 1.0)[:, None]
    if config.tie_pre_bias:
        new["b_enc"] = new["b_dec"].copy()
    for name, x in new.items():
        if not np.all(np.isfinite(x)):
            raise NumericalAbort(f"non-finite values in {name} after Adam step {state.t}")
    return SaeParams(**new)


# -- data streaming ---------------------------------------------------------

def minibatches(data, batch_size: int, seed: int = 0, epochs: int | None = None) -> Iterator[np.ndarray]:
    """Shuffled fixed-size batches from an in-memory array, reshuffled every epoch."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < batch_size:
        raise ValueError(f"dataset has {n} rows, fewer than batch_size={batch_size}")
    rng = make_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield data[perm[start:start + batch_size]]
        epoch += 1


# -- training loop ----------------------------------------------------------

@dataclass
class TrainResult:
    params: SaeParams
    spec: ActivationSpec
    log: list[dict]
    iterations_run: int


def _batch_nmse(z: np.ndarray, z_hat: np.ndarray) -> float:
    den = float(np.sum(_sq_row_norms(z - z.mean(axis=0))))
    if den == 0.0:
        return math.nan
    return float(np.sum(_sq_row_norms(z - z_hat))) / den


def train(stream: Iterable, config: TrainConfig, spec: ActivationSpec,
          on_checkpoint: Callable[[int, SaeParams, ActivationSpec], None] | None = None) -> TrainResult:
    it = iter(stream)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("training stream is empty") from None
    first = first.rows if isinstance(first, EmbeddingBatch) else np.asarray(first, dtype=np.float64)
    d = first.shape[1]
    h = config.latent_dim(d)
    if spec.kind in ("topk", "batch_topk") and spec.k > h:
        raise ValueError(f"k={spec.k} exceeds latent width h={h}")

    params = init_params(make_rng(config.seed), d, h)
    params.b_dec = first.mean(axis=0)
    if config.tie_pre_bias:
        params.b_enc = params.b_dec.copy()
    state = AdamState()
    tracker = DeadLatentTracker(h, config.dead_window)
    thresholds: list[float] = []
    rows: list[dict] = []
    batch = first
    done = 0
    for i in range(config.iterations):
        if i > 0:
            nxt = next(it, None)
            if nxt is None:
                warnings.warn(f"data stream exhausted after {i} of {config.iterations} iterations")
                break
            batch = nxt.rows if isinstance(nxt, EmbeddingBatch) else np.asarray(nxt, dtype=np.float64)

        fp = run_forward(batch, params, spec, config)
        tracker.update(i, fp.act.mask.any(axis=0))
        dead = tracker.dead_mask(i)
        if dead.any():
            fp = run_forward(batch, params, spec, config, dead_mask=dead, mask=fp.act.mask)
        if not math.isfinite(fp.total):
            raise NumericalAbort(f"loss became {fp.total} at iteration {i}: {fp.losses}")
        grads, _ = backward(batch, params, spec, config, fp=fp)
        params = adam_step(params, grads, state, config)
        if "min_selected" in fp.act.extras:
            thresholds.append(fp.act.extras["min_selected"])
        done = i + 1

        if config.log_every and (i % config.log_every == 0 or done == config.iterations):
            rows.append({
                "iter": i,
                "loss_total": fp.total,
                "loss_mse": fp.losses["loss_mse"],
                "loss_aux": fp.losses["loss_aux"],
                "loss_afa": fp.losses["loss_afa"],
                "nmse": _batch_nmse(fp.z, fp.z_hat),
                "mean_l0": float(fp.act.k_per_row.mean()),
                "dead_count": int(dead.sum()),
            })
        if on_checkpoint and config.checkpoint_every and done % config.checkpoint_every == 0:
            on_checkpoint(done, params, _final_spec(spec, thresholds))

    return TrainResult(params, _final_spec(spec, thresholds), rows, done)


def _final_spec(spec: ActivationSpec, thresholds: list[float]) -> ActivationSpec:
    if spec.kind != "batch_topk" or not thresholds:
        return spec
    return ActivationSpec(spec.kind, spec.k, spec.kappa, float(np.mean(thresholds)))


def default_config_dict() -> dict:
    return {f.name: f.default for f in fields(TrainConfig)}
