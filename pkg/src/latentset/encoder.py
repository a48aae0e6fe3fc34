"""Map masked multiview records to diagonal-Gaussian latent posteriors.

Per-modality MLP encoders feed a single-query masked attention pool; two
linear heads emit the posterior mean and a tanh-squashed log-variance. Each
modality input is the feature vector with held-out entries zero-filled,
concatenated with its binary keep-mask, so true zeros stay distinguishable
from masked ones.

The forward pass is written once over (B, .) matrices and runs on either a
gradient tape (training) or plain numpy (inference); excluded modalities get
an exactly-zero attention weight, which keeps their values and gradients out
of the fused embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import ArrayOrNode
from .errors import NoEvidenceError, ShapeError
from .gaussians import LOGVAR_MAX, GaussianPosterior


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions shared by encoder, decoders and task head."""

    d: int = 8
    embed: int = 32
    hidden: int = 64
    head_hidden: int = 32
    n_modalities: int = 3
    modality_dims: tuple[int, ...] = (16, 16, 16)
    task: str = "binary"
    deterministic: bool = False

    def __post_init__(self):
        if len(self.modality_dims) != self.n_modalities:
            raise ShapeError(
                f"modality_dims has {len(self.modality_dims)} entries for "
                f"{self.n_modalities} modalities"
            )
        if self.task not in ("binary", "binary_threshold", "regression"):
            raise ShapeError(f"unknown task '{self.task}'")

    @property
    def n_outputs(self) -> int:
        # Two logits for binary classification; (mean, log-variance) for regression.
        return 2

    @property
    def is_classification(self) -> bool:
        return self.task in ("binary", "binary_threshold")


@dataclass(frozen=True)
class PatientRecord:
    """One multiview record: per-modality feature vectors plus availability mask."""

    id: str
    modalities: tuple[np.ndarray, ...]
    mask: np.ndarray
    label: Optional[float] = None
    z_true: Optional[np.ndarray] = None

    def __post_init__(self):
        mods = tuple(np.asarray(m, dtype=np.float64) for m in self.modalities)
        mask = np.asarray(self.mask, dtype=np.int8)
        if mask.shape != (len(mods),):
            raise ShapeError(f"mask shape {mask.shape} does not cover {len(mods)} modalities")
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "mask", mask)
        if self.z_true is not None:
            object.__setattr__(self, "z_true", np.asarray(self.z_true, dtype=np.float64))

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)


Params = dict[str, np.ndarray]


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Fresh encoder weights.

    Hidden layers get scaled-normal init. Per-modality output biases are
    drawn separately so the attention mixture exposes which modalities are
    present from the first step. Both heads are small two-layer networks; the
    log-variance head's final layer starts at exactly zero so every posterior
    begins at unit variance, which avoids both early collapse and variance
    explosion.
    """
    p: Params = {}
    H, E, d, Hh = cfg.hidden, cfg.embed, cfg.d, cfg.head_hidden
    for m, pm in enumerate(cfg.modality_dims):
        fan_in = 2 * pm
        p[f"enc.mod{m}.W1"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, H))
        p[f"enc.mod{m}.b1"] = np.zeros(H)
        p[f"enc.mod{m}.W2"] = rng.normal(0.0, 1.0 / math.sqrt(H), (H, E))
        p[f"enc.mod{m}.b2"] = rng.normal(0.0, 0.5, E)
    p["enc.attn.q"] = rng.normal(0.0, 1.0 / math.sqrt(E), (1, E))
    p["enc.attn.Wk"] = rng.normal(0.0, 1.0 / math.sqrt(E), (E, E))
    p["enc.attn.Wv"] = rng.normal(0.0, 1.0 / math.sqrt(E), (E, E))
    p["enc.head.mu.W1"] = rng.normal(0.0, 1.0 / math.sqrt(E), (E, Hh))
    p["enc.head.mu.b1"] = np.zeros(Hh)
    p["enc.head.mu.W2"] = rng.normal(0.0, 1.0 / math.sqrt(Hh), (Hh, d))
    p["enc.head.mu.b2"] = np.zeros(d)
    p["enc.head.lv.W1"] = rng.normal(0.0, 1.0 / math.sqrt(E), (E, Hh))
    p["enc.head.lv.b1"] = np.zeros(Hh)
    p["enc.head.lv.W2"] = np.zeros((Hh, d))
    p["enc.head.lv.b2"] = np.zeros(d)
    return p


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Reconstruction decoders (one per modality) and the task head."""
    p: Params = {}
    H, E, d = cfg.hidden, cfg.embed, cfg.d
    for m, pm in enumerate(cfg.modality_dims):
        p[f"dec.mod{m}.Wz"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, H))
        p[f"dec.mod{m}.Wh"] = rng.normal(0.0, 1.0 / math.sqrt(E), (E, H))
        p[f"dec.mod{m}.b1"] = np.zeros(H)
        p[f"dec.mod{m}.Wo"] = rng.normal(0.0, 1.0 / math.sqrt(H), (H, pm))
        p[f"dec.mod{m}.bo"] = np.zeros(pm)
    p["task.W1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, H))
    p["task.b1"] = np.zeros(H)
    p["task.Wo"] = rng.normal(0.0, 1.0 / math.sqrt(H), (H, cfg.n_outputs))
    p["task.bo"] = np.zeros(cfg.n_outputs)
    p["task.log_temp"] = np.zeros(1)
    return p


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p = init_encoder_params(cfg, rng)
    p.update(init_decoder_params(cfg, rng))
    return p


@dataclass
class PackedBatch:
    """Constant matrices for one batch of masked records/views.

    inputs[m] is (B, 2*p_m): zero-filled observed features then the keep-mask.
    mask is (B, M) with 1 where the modality participates in attention.
    """

    inputs: list[np.ndarray]
    mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]


def pack_records(
    records: Sequence[PatientRecord],
    cfg: ModelConfig,
    mask_overrides: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> PackedBatch:
    """Stack full records into batch matrices, applying optional mask overrides."""
    B, M = len(records), cfg.n_modalities
    inputs = [np.zeros((B, 2 * pm)) for pm in cfg.modality_dims]
    mask = np.zeros((B, M))
    for i, rec in enumerate(records):
        if rec.n_modalities != M:
            raise ShapeError(f"record {rec.id} has {rec.n_modalities} modalities, expected {M}")
        eff = rec.mask.astype(np.float64)
        if mask_overrides is not None and mask_overrides[i] is not None:
            eff = eff * np.asarray(mask_overrides[i], dtype=np.float64)
        if not np.any(eff > 0):
            raise NoEvidenceError(f"record {rec.id} has no observed modality (no evidence)")
        mask[i] = eff
        for m in range(M):
            if eff[m] > 0:
                pm = cfg.modality_dims[m]
                x = rec.modalities[m]
                if x.shape != (pm,):
                    raise ShapeError(
                        f"record {rec.id} modality {m} has shape {x.shape}, expected ({pm},)"
                    )
                inputs[m][i, :pm] = x
                inputs[m][i, pm:] = 1.0
    return PackedBatch(inputs=inputs, mask=mask)


def _affine(x: ArrayOrNode, w: ArrayOrNode, b: ArrayOrNode) -> ArrayOrNode:
    return dm.badd_row(x @ w, b)


def modality_embed(params: Mapping[str, ArrayOrNode], m: int, x: ArrayOrNode) -> ArrayOrNode:
    """(B, 2*p_m) inputs -> (B, E) modality summaries."""
    h = dm.tanh(_affine(x, params[f"enc.mod{m}.W1"], params[f"enc.mod{m}.b1"]))
    return _affine(h, params[f"enc.mod{m}.W2"], params[f"enc.mod{m}.b2"])


def encode_graph(
    params: Mapping[str, ArrayOrNode],
    batch: PackedBatch,
    cfg: ModelConfig,
) -> tuple[ArrayOrNode, ArrayOrNode, ArrayOrNode]:
    """Forward pass for a packed batch.

    Returns (mu, log_var, fused) with shapes (B, d), (B, d), (B, E). Works on
    tape nodes or numpy arrays depending on what `params` holds.
    """
    B, M = batch.batch_size, cfg.n_modalities
    E = cfg.embed
    template = params["enc.attn.q"]

    embeds = []
    logits_cols = []
    q_col = params["enc.attn.q"].T  # (E, 1)
    inv_sqrt_e = 1.0 / math.sqrt(E)
    for m in range(M):
        x = dm.lift(template, batch.inputs[m])
        e_m = modality_embed(params, m, x)
        embeds.append(e_m)
        k_m = e_m @ params["enc.attn.Wk"]
        logits_cols.append((k_m @ q_col) * inv_sqrt_e)  # (B, 1)

    # Stack logit columns into (B, M) with one-hot selectors, then run a
    # mask-weighted softmax: excluded modalities keep an exactly-zero weight,
    # which is equivalent to a -inf logit but stays finite on the tape.
    logits = None
    for m in range(M):
        sel = dm.lift(template, np.eye(M)[m : m + 1, :])  # (1, M)
        contrib = logits_cols[m] @ sel
        logits = contrib if logits is None else logits + contrib

    observed = batch.mask > 0
    masked_vals = np.where(observed, dm.peek(logits), -np.inf)
    row_max = np.max(masked_vals, axis=1, keepdims=True)
    shift = np.where(np.isfinite(row_max), row_max, 0.0)
    shifted = logits - dm.lift(template, np.broadcast_to(shift, (B, M)).copy())
    weights_raw = dm.exp(shifted) * dm.lift(template, batch.mask)
    denom = dm.rowsum(weights_raw)  # (B,), >= 1 because the row max shifts to 0
    inv_denom = dm.exp(dm.log(denom) * -1.0)
    weights = weights_raw * dm.colbroad(inv_denom, M)

    fused = None
    ones_row = np.ones((1, E))
    for m in range(M):
        sel_col = dm.lift(template, np.eye(M)[:, m : m + 1])  # (M, 1)
        w_col = weights @ sel_col  # (B, 1)
        v_m = embeds[m] @ params["enc.attn.Wv"]
        contrib = (w_col @ dm.lift(template, ones_row)) * v_m
        fused = contrib if fused is None else fused + contrib

    mu_h = dm.tanh(_affine(fused, params["enc.head.mu.W1"], params["enc.head.mu.b1"]))
    mu = _affine(mu_h, params["enc.head.mu.W2"], params["enc.head.mu.b2"])
    lv_h = dm.tanh(_affine(fused, params["enc.head.lv.W1"], params["enc.head.lv.b1"]))
    raw = _affine(lv_h, params["enc.head.lv.W2"], params["enc.head.lv.b2"])
    log_var = dm.tanh(raw * (1.0 / LOGVAR_MAX)) * LOGVAR_MAX
    if cfg.deterministic:
        log_var = dm.lift(template, np.zeros((B, cfg.d)))
    return mu, log_var, fused


def encode_batch(
    params: Params, batch: PackedBatch, cfg: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Numpy-mode forward over a packed batch: (mu, log_var, fused) arrays."""
    mu, lv, fused = encode_graph(params, batch, cfg)
    return np.asarray(mu), np.asarray(lv), np.asarray(fused)


def encode(
    params: Params,
    record: PatientRecord,
    cfg: ModelConfig,
    mask_override: Optional[np.ndarray] = None,
) -> GaussianPosterior:
    """Posterior for one record under its effective mask (record mask AND override)."""
    batch = pack_records([record], cfg, [mask_override])
    mu, lv, _ = encode_batch(params, batch, cfg)
    return GaussianPosterior(mu[0], lv[0])


def encode_modality(
    params: Params,
    m: int,
    x_m: np.ndarray,
    keep_mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Deterministic per-modality MLP summary of one observed feature vector."""
    x_m = np.asarray(x_m, dtype=np.float64)
    keep = np.ones_like(x_m) if keep_mask is None else np.asarray(keep_mask, dtype=np.float64)
    if keep.shape != x_m.shape:
        raise ShapeError(f"keep mask shape {keep.shape} does not match input {x_m.shape}")
    w1 = params[f"enc.mod{m}.W1"]
    if x_m.shape[0] * 2 != w1.shape[0]:
        raise ShapeError(
            f"modality {m} expects {w1.shape[0] // 2} features, got {x_m.shape[0]}"
        )
    xin = np.concatenate([x_m * keep, keep])[None, :]
    out = modality_embed(params, m, xin)
    return np.asarray(out)[0]


def aggregate(
    params: Params,
    embeddings: Sequence[tuple[int, np.ndarray]],
    mask: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Masked single-query attention pool over observed modality embeddings.

    `embeddings` lists (modality index, E-vector) pairs for exactly the
    observed modalities, in any order; the pool is invariant to that order.
    """
    items = sorted(embeddings, key=lambda t: t[0])
    if mask is not None:
        observed = {i for i, flag in enumerate(np.asarray(mask)) if flag}
        items = [(m, e) for m, e in items if m in observed]
    if not items:
        raise NoEvidenceError("no observed modality to aggregate (no evidence)")
    E = params["enc.attn.q"].shape[1]
    emb = np.stack([np.asarray(e, dtype=np.float64) for _, e in items])  # (n, E)
    keys = emb @ params["enc.attn.Wk"]
    logits = (keys @ params["enc.attn.q"].T)[:, 0] / math.sqrt(E)
    w = dm.softmax_rows(logits[None, :])[0]
    values = emb @ params["enc.attn.Wv"]
    return w @ values
