"""Predictive inference with uncertainty propagation, and the evaluation suite.

Monte Carlo prediction draws antithetic noise: samples come in +/- pairs (an
odd sample count adds one zero-noise draw), which halves variance and makes
affine heads exactly noise-free. The deterministic evaluation variant is the
single zero-noise sample, so it never touches the variance head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import diffmath as dm
from .encoder import ModelConfig, Params, PatientRecord, encode_graph, pack_records
from .errors import ShapeError
from .gaussians import GaussianPosterior, StandardPrior, entropy_rows, poe_fuse, skl_rows
from .metrics import MetricsReport, auprc, auroc, ece, mmd, mse, nll, spearman
from .objectives import pack_views, task_head
from .seeding import derive_rng
from .viewgen import ViewPolicy, mask_for_index, paired_views, sweep_masks

VARIANTS = ("distributional", "deterministic")


@dataclass(frozen=True)
class PredictiveDistribution:
    """Label distribution after marginalizing the latent posterior."""

    kind: str                               # "classification" | "regression"
    probs: Optional[np.ndarray] = None      # class probabilities, sum to 1
    mean: Optional[float] = None
    aleatoric: Optional[float] = None       # mean of per-sample head variances
    epistemic: Optional[float] = None       # variance of per-sample head means

    def __post_init__(self):
        if self.kind == "classification":
            p = np.asarray(self.probs, dtype=np.float64)
            if np.any(p < 0) or abs(float(np.sum(p)) - 1.0) > 1e-12:
                raise ShapeError("class probabilities must be non-negative and sum to 1")
            object.__setattr__(self, "probs", p)
        elif self.kind == "regression":
            if self.aleatoric is None or self.epistemic is None or self.mean is None:
                raise ShapeError("regression prediction needs mean and both variances")
            if self.aleatoric < 0 or self.epistemic < 0:
                raise ShapeError("variances must be non-negative")
        else:
            raise ShapeError(f"unknown prediction kind '{self.kind}'")


def antithetic_noise(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """(k, d) noise in +/- pairs; an odd k appends one zero row."""
    if k < 1:
        raise ShapeError("sample count must be at least 1")
    half = rng.normal(size=(k // 2, d))
    rows = [half, -half]
    if k % 2 == 1:
        rows.append(np.zeros((1, d)))
    return np.concatenate(rows, axis=0)


def _head_outputs(params: Params, z: np.ndarray) -> np.ndarray:
    return np.asarray(task_head(params, z))


def _classification_probs(params: Params, z: np.ndarray) -> np.ndarray:
    logits = _head_outputs(params, z) / float(np.exp(params["task.log_temp"][0]))
    return dm.softmax_rows(logits)


def predict(
    params: Params,
    record: PatientRecord,
    cfg: ModelConfig,
    mask: Optional[np.ndarray] = None,
    k: int = 8,
    rng: Optional[np.random.Generator] = None,
) -> PredictiveDistribution:
    """Average the task head over k reparameterized posterior samples."""
    if rng is None:
        rng = derive_rng(0, "predict", record.id)
    batch = pack_records([record], cfg, [mask])
    mu, lv, _ = encode_graph(params, batch, cfg)
    mu, lv = np.asarray(mu)[0], np.asarray(lv)[0]
    eps = antithetic_noise(k, cfg.d, rng)
    z = mu[None, :] + np.exp(0.5 * lv)[None, :] * eps
    if cfg.is_classification:
        probs = np.mean(_classification_probs(params, z), axis=0)
        return PredictiveDistribution(kind="classification", probs=probs)
    out = _head_outputs(params, z)
    means = out[:, 0]
    log_v = np.tanh(out[:, 1] / 8.0) * 8.0
    return PredictiveDistribution(
        kind="regression",
        mean=float(np.mean(means)),
        aleatoric=float(np.mean(np.exp(log_v))),
        epistemic=float(np.var(means)),
    )


def predictive_entropy(p: PredictiveDistribution) -> float:
    """Shannon entropy of the class distribution, with 0*log(0) := 0."""
    if p.kind != "classification":
        raise ShapeError("predictive entropy is defined for classification; "
                         "use the variance decomposition for regression")
    probs = p.probs[p.probs > 0]
    return float(-np.sum(probs * np.log(probs)))


def selective_predict(p: PredictiveDistribution, threshold: float) -> Optional[int]:
    """Top class, or None (abstain) when predictive entropy exceeds the threshold."""
    if threshold < 0:
        raise ShapeError("abstention threshold must be non-negative")
    if predictive_entropy(p) > threshold:
        return None
    return int(np.argmax(p.probs))


def update_sequential(
    params: Params,
    snapshots: Sequence[PatientRecord],
    cfg: ModelConfig,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> GaussianPosterior:
    """Fuse posteriors from successive snapshots via product-of-experts.

    Order-independent by construction. Note a single snapshot does not equal
    plain `encode`: fusion multiplies the prior in once, so even one expert
    comes out sharper than its encoder posterior.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise ShapeError("update_sequential needs at least one snapshot")
    batch = pack_records(snapshots, cfg, list(masks) if masks is not None else None)
    mu, lv, _ = encode_graph(params, batch, cfg)
    mu, lv = np.asarray(mu), np.asarray(lv)
    experts = [GaussianPosterior(mu[i], lv[i]) for i in range(len(snapshots))]
    key = lambda q: (q.mean.tobytes(), q.log_var.tobytes())
    return poe_fuse(experts, StandardPrior(cfg.d), sort_key=key)


def representation(q: GaussianPosterior) -> np.ndarray:
    """Transfer feature vector: concatenated posterior mean and log-variance."""
    return np.concatenate([np.asarray(q.mean), np.asarray(q.log_var)])


# ---------------------------------------------------------------------------
# Batched evaluation.
# ---------------------------------------------------------------------------


def _restricted(record: PatientRecord, mask: np.ndarray) -> PatientRecord:
    eff = (record.mask * np.asarray(mask, dtype=np.int8)).astype(np.int8)
    return dataclasses.replace(record, mask=eff)


def posterior_volume_correlation(
    log_dets: np.ndarray, per_record_nll: np.ndarray
) -> Optional[float]:
    """Spearman correlation between posterior volume and prediction difficulty."""
    return spearman(log_dets, per_record_nll)


def evaluate_model(
    params: Params,
    records: Sequence[PatientRecord],
    cfg: ModelConfig,
    policy: ViewPolicy,
    mask_level: float = 0.0,
    variant: str = "distributional",
    k: int = 8,
    bins: int = 15,
    seed: int = 0,
    config_hash: str = "",
) -> MetricsReport:
    """Full metric suite for one checkpoint at one missingness level.

    The deterministic variant predicts from the posterior mean only (single
    zero-noise sample) and reports nothing that depends on the variance head,
    so its numbers are invariant to it by construction.
    """
    if variant not in VARIANTS:
        raise ShapeError(f"unknown eval variant '{variant}'")
    records = list(records)
    if not records:
        raise ShapeError("evaluation needs a non-empty record set")
    masks = sweep_masks(cfg.n_modalities, mask_level)
    eff_masks = [mask_for_index(masks, i) for i in range(len(records))]
    batch = pack_records(records, cfg, eff_masks)
    mu, lv, _ = encode_graph(params, batch, cfg)
    mu, lv = np.asarray(mu), np.asarray(lv)
    n = len(records)

    # common random numbers across mask levels: level-to-level differences
    # then reflect the masks, not resampled Monte Carlo noise
    k_eff = 1 if variant == "deterministic" else k
    rng = derive_rng(seed, "eval-noise", variant)
    eps = antithetic_noise(k_eff, cfg.d, rng)
    sigma = np.exp(0.5 * lv)

    labels = np.asarray([r.label for r in records], dtype=np.float64)
    metrics: dict[str, Optional[float]] = {}
    meta: dict[str, object] = {
        "mask_level": mask_level,
        "variant": variant,
        "k": k_eff,
        "seed": seed,
        "config_hash": config_hash,
        "n_records": n,
    }

    if cfg.is_classification:
        prob_sum = np.zeros((n, 2))
        for j in range(k_eff):
            z = mu + sigma * eps[j][None, :] if variant == "distributional" else mu
            prob_sum += _classification_probs(params, z)
        probs = prob_sum / k_eff
        p1 = probs[:, 1]
        metrics["auroc"] = auroc(labels, p1)
        metrics["auprc"] = auprc(labels, p1)
        metrics["nll"] = nll(labels, p1)
        metrics["ece"] = ece(labels, p1, bins=bins)
        clipped = np.clip(np.where(labels > 0.5, p1, 1.0 - p1), 1e-12, None)
        per_record_nll = -np.log(clipped)
    else:
        pred_sum = np.zeros(n)
        var_sum = np.zeros(n)
        means_acc = []
        for j in range(k_eff):
            z = mu + sigma * eps[j][None, :] if variant == "distributional" else mu
            out = _head_outputs(params, z)
            means_acc.append(out[:, 0])
            var_sum += np.exp(np.tanh(out[:, 1] / 8.0) * 8.0)
        means_stack = np.stack(means_acc)
        pred = np.mean(means_stack, axis=0)
        total_var = var_sum / k_eff + np.var(means_stack, axis=0)
        metrics["mse"] = mse(labels, pred)
        per_record_nll = 0.5 * (np.log(2.0 * np.pi * total_var) + (labels - pred) ** 2 / total_var)
        metrics["nll"] = float(np.mean(per_record_nll))

    # Cross-view diagnostics: two stochastic views per (masked) record.
    views_a, views_b = [], []
    for i, rec in enumerate(records):
        restricted = _restricted(rec, eff_masks[i])
        vrng = derive_rng(seed, "eval-views", rec.id)
        va, vb = paired_views(restricted, policy, vrng)
        views_a.append(va)
        views_b.append(vb)
    mu_a, lv_a, _ = encode_graph(params, pack_views(views_a, cfg), cfg)
    mu_b, lv_b, _ = encode_graph(params, pack_views(views_b, cfg), cfg)
    mu_a, lv_a, mu_b, lv_b = map(np.asarray, (mu_a, lv_a, mu_b, lv_b))
    est = mmd(mu_a, mu_b)
    metrics["cross_view_mmd"] = est.value
    meta["mmd_biased"] = est.biased

    if variant == "distributional":
        metrics["mean_posterior_entropy"] = float(np.mean(entropy_rows(lv)))
        metrics["cross_view_skl"] = float(np.mean(skl_rows(mu_a, lv_a, mu_b, lv_b)))
        log_dets = np.sum(lv, axis=1)
        metrics["volume_nll_spearman"] = posterior_volume_correlation(log_dets, per_record_nll)

    return MetricsReport(metrics=metrics, meta=meta)
