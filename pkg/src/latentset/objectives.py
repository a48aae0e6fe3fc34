"""Training objectives: reconstruction, view consistency, InfoNCE, priors.

`loss_total` assembles the weighted sum over a batch on a single gradient
tape. Terms with a zero weight are skipped entirely, so their gradients are
exactly zero by construction; the per-term breakdown always recombines to the
weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import diffmath as dm
from . import gaussians as gs
from .diffmath import ArrayOrNode, Node, Tape
from .encoder import (
    ModelConfig,
    PackedBatch,
    Params,
    PatientRecord,
    encode_graph,
    pack_records,
)
from .errors import ShapeError
from .gaussians import GaussianPosterior, StandardPrior
from .viewgen import View, ViewPolicy, paired_views

CONS_KINDS = ("skl", "w2", "kl")
CONS_MODES = ("pairwise", "prototype")


@dataclass(frozen=True)
class LossWeights:
    """Weights, temperature and variance band for the combined objective."""

    lambda_rec: float = 1.0
    lambda_cons: float = 1.0
    lambda_reg: float = 0.01
    lambda_nce: float = 0.1
    lambda_sup: float = 0.0
    lambda_var: float = 0.1
    tau: float = 0.1
    sigma_min: float = 0.05
    sigma_max: float = 5.0
    mc_samples: int = 8
    cons_kind: str = "skl"
    cons_mode: str = "pairwise"
    nce_on_samples: bool = False
    # Probability of occluding the decoder's fused-context input per view
    # during training. Without it the decoder reconstructs straight from the
    # context and the latent path gets no reconstruction gradient, which
    # collapses the posterior scale.
    ctx_dropout: float = 0.5

    def __post_init__(self):
        lambdas = (
            self.lambda_rec,
            self.lambda_cons,
            self.lambda_reg,
            self.lambda_nce,
            self.lambda_sup,
            self.lambda_var,
        )
        if any(v < 0 for v in lambdas):
            raise ShapeError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ShapeError("temperature must be positive")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ShapeError("variance band must satisfy 0 < sigma_min < sigma_max")
        if self.mc_samples < 1:
            raise ShapeError("mc_samples must be at least 1")
        if not (0.0 <= self.ctx_dropout <= 1.0):
            raise ShapeError("ctx_dropout must lie in [0, 1]")
        if self.cons_kind not in CONS_KINDS:
            raise ShapeError(f"unknown consistency kind '{self.cons_kind}'")
        if self.cons_mode not in CONS_MODES:
            raise ShapeError(f"unknown consistency mode '{self.cons_mode}'")


def pack_views(views: Sequence[View], cfg: ModelConfig) -> PackedBatch:
    """Stack views into encoder input matrices (zero-filled values + keep-mask)."""
    B, M = len(views), cfg.n_modalities
    inputs = [np.zeros((B, 2 * pm)) for pm in cfg.modality_dims]
    mask = np.zeros((B, M))
    for i, v in enumerate(views):
        mask[i] = v.mask.astype(np.float64)
        for m in range(M):
            if v.mask[m] == 1:
                pm = cfg.modality_dims[m]
                inputs[m][i, :pm] = v.x_obs[m]
                inputs[m][i, pm:] = v.keep[m]
    return PackedBatch(inputs=inputs, mask=mask)


def lift_params(tape: Tape, params: Params) -> dict[str, Node]:
    """Create one leaf per parameter; iteration order is sorted by name."""
    return {name: tape.leaf(params[name]) for name in sorted(params)}


def _sample_rows(mu: ArrayOrNode, lv: ArrayOrNode, noise: np.ndarray) -> ArrayOrNode:
    return mu + dm.exp(lv * 0.5) * dm.lift(mu, noise)


def decode_modality(
    params: Mapping[str, ArrayOrNode], m: int, z: ArrayOrNode, ctx: ArrayOrNode
) -> ArrayOrNode:
    """Reconstruction head for modality m given latents and the fused context."""
    pre = z @ params[f"dec.mod{m}.Wz"] + ctx @ params[f"dec.mod{m}.Wh"]
    h = dm.tanh(dm.badd_row(pre, params[f"dec.mod{m}.b1"]))
    return dm.badd_row(h @ params[f"dec.mod{m}.Wo"], params[f"dec.mod{m}.bo"])


def task_head(params: Mapping[str, ArrayOrNode], z: ArrayOrNode) -> ArrayOrNode:
    """Task decoder: (B, d) latents -> (B, 2) logits or (mean, raw log-variance)."""
    h = dm.tanh(dm.badd_row(z @ params["task.W1"], params["task.b1"]))
    return dm.badd_row(h @ params["task.Wo"], params["task.bo"])


def _rec_term(
    params: Mapping[str, ArrayOrNode],
    views: Sequence[View],
    z: ArrayOrNode,
    ctx: ArrayOrNode,
    cfg: ModelConfig,
) -> ArrayOrNode:
    """Per-view reconstruction losses, shape (B,).

    Gaussian NLL of the held-out entries with unit observation variance,
    averaged over the held-out entries of the view; exact zero for views with
    nothing held out.
    """
    B = len(views)
    per_record = None
    counts = np.array([float(v.n_held_out) for v in views])
    for m in range(cfg.n_modalities):
        hold = np.stack([(1.0 - v.keep[m]) * v.mask[m] for v in views])
        if not np.any(hold):
            continue
        target = np.stack([v.x_hold[m] for v in views])
        pred = decode_modality(params, m, z, ctx)
        diff = (pred - dm.lift(z, target)) * dm.lift(z, hold)
        sq = dm.rowsum(dm.square(diff))
        per_record = sq if per_record is None else per_record + sq
    if per_record is None:
        return dm.lift(z, np.zeros(B))
    weights = np.where(counts > 0, 0.5 / np.maximum(counts, 1.0), 0.0)
    return per_record * dm.lift(z, weights)


def _cosine_rows(a: ArrayOrNode, b: ArrayOrNode, n_cols: int) -> ArrayOrNode:
    """Row-normalized similarity matrix between two (B, d) stacks."""
    def normalize(x):
        sq = dm.clampmin(dm.rowsum(dm.square(x)), 1e-30)
        inv_norm = dm.exp(dm.log(sq) * -0.5)
        return x * dm.colbroad(inv_norm, n_cols)

    return normalize(a) @ normalize(b).T


def _nce_from_mats(sim: ArrayOrNode, tau: float, batch: int) -> ArrayOrNode:
    logits = sim * (1.0 / tau)
    lse = dm.logsumexp_rows(logits)
    eye = dm.lift(logits, np.eye(batch))
    pos = dm.ssum(logits * eye)
    return (dm.ssum(lse) - pos) * (1.0 / batch)


def _cons_rows(kind: str, mu_a, lv_a, mu_b, lv_b) -> ArrayOrNode:
    if kind == "skl":
        return gs.skl_rows(mu_a, lv_a, mu_b, lv_b)
    if kind == "w2":
        return gs.w2_sq_rows(mu_a, lv_a, mu_b, lv_b)
    return gs.kl_rows(mu_a, lv_a, mu_b, lv_b)


def build_total_loss(
    params: Mapping[str, ArrayOrNode],
    views_a: Sequence[View],
    views_b: Sequence[View],
    noises: Mapping[str, np.ndarray],
    weights: LossWeights,
    cfg: ModelConfig,
    labels: Optional[np.ndarray] = None,
    records: Optional[Sequence[PatientRecord]] = None,
) -> tuple[ArrayOrNode, dict[str, ArrayOrNode]]:
    """Assemble the weighted batch objective; returns (total, unweighted terms).

    `noises` supplies the reparameterization draws: keys "a"/"b" of shape
    (B, d), plus "sup" when the supervised term is active. In deterministic
    mode the encoder pins log-variances to zero and the noises are ignored.
    """
    B = len(views_a)
    if len(views_b) != B:
        raise ShapeError("view lists must be aligned")
    for va, vb in zip(views_a, views_b):
        if va.record_id != vb.record_id:
            raise ShapeError(
                f"paired views reference different records: {va.record_id} vs {vb.record_id}"
            )

    mu_a, lv_a, ctx_a = encode_graph(params, pack_views(views_a, cfg), cfg)
    mu_b, lv_b, ctx_b = encode_graph(params, pack_views(views_b, cfg), cfg)
    zero = np.zeros((B, cfg.d))
    noise_a = zero if cfg.deterministic else noises["a"]
    noise_b = zero if cfg.deterministic else noises["b"]

    terms: dict[str, ArrayOrNode] = {}
    total = None

    def accumulate(name: str, value: ArrayOrNode, lam: float):
        nonlocal total
        terms[name] = value
        weighted = value * lam
        total = weighted if total is None else total + weighted

    if weights.lambda_rec > 0:
        z_a = _sample_rows(mu_a, lv_a, noise_a)
        z_b = _sample_rows(mu_b, lv_b, noise_b)
        keep_a = noises.get("ctx_a")
        keep_b = noises.get("ctx_b")
        dec_ctx_a = ctx_a if keep_a is None else ctx_a * dm.lift(mu_a, np.repeat(
            keep_a[:, None], cfg.embed, axis=1))
        dec_ctx_b = ctx_b if keep_b is None else ctx_b * dm.lift(mu_b, np.repeat(
            keep_b[:, None], cfg.embed, axis=1))
        rec = (dm.ssum(_rec_term(params, views_a, z_a, dec_ctx_a, cfg))
               + dm.ssum(_rec_term(params, views_b, z_b, dec_ctx_b, cfg))) * (0.5 / B)
        accumulate("rec", rec, weights.lambda_rec)

    if weights.lambda_cons > 0:
        if weights.cons_mode == "prototype":
            if records is None:
                raise ShapeError("prototype consistency needs the source records")
            mu_f, lv_f, _ = encode_graph(params, pack_records(records, cfg), cfg)
            rows = (_cons_rows(weights.cons_kind, mu_a, lv_a, mu_f, lv_f)
                    + _cons_rows(weights.cons_kind, mu_b, lv_b, mu_f, lv_f)) * 0.5
        else:
            rows = _cons_rows(weights.cons_kind, mu_a, lv_a, mu_b, lv_b)
        accumulate("cons", dm.ssum(rows) * (1.0 / B), weights.lambda_cons)

    if weights.lambda_nce > 0:
        if B < 2:
            raise ShapeError("InfoNCE needs batch size >= 2 (no negatives)")
        if weights.nce_on_samples:
            feat_a = _sample_rows(mu_a, lv_a, noise_a)
            feat_b = _sample_rows(mu_b, lv_b, noise_b)
        else:
            feat_a, feat_b = mu_a, mu_b
        sim = _cosine_rows(feat_a, feat_b, cfg.d)
        accumulate("nce", _nce_from_mats(sim, weights.tau, B), weights.lambda_nce)

    if weights.lambda_reg > 0:
        zeros = dm.lift(mu_a, zero)
        reg = (dm.ssum(gs.kl_rows(mu_a, lv_a, zeros, zeros))
               + dm.ssum(gs.kl_rows(mu_b, lv_b, zeros, zeros))) * (0.5 / B)
        accumulate("reg", reg, weights.lambda_reg)

    if weights.lambda_var > 0:
        pen = (dm.ssum(gs.var_penalty_rows(lv_a, weights.sigma_min, weights.sigma_max))
               + dm.ssum(gs.var_penalty_rows(lv_b, weights.sigma_min, weights.sigma_max))) * (0.5 / B)
        accumulate("var", pen, weights.lambda_var)

    if weights.lambda_sup > 0:
        if records is None or labels is None:
            raise ShapeError("supervised term needs records and labels")
        labeled = [i for i in range(B) if not np.isnan(labels[i])]
        if labeled:
            recs = [records[i] for i in labeled]
            mu_s, lv_s, _ = encode_graph(params, pack_records(recs, cfg), cfg)
            noise_s = np.zeros((len(labeled), cfg.d)) if cfg.deterministic else noises["sup"][labeled]
            z_s = _sample_rows(mu_s, lv_s, noise_s)
            y = np.asarray([labels[i] for i in labeled], dtype=np.float64)
            sup = supervised_nll(params, z_s, y, cfg)
            accumulate("sup", sup, weights.lambda_sup)
        else:
            terms["sup"] = np.float64(0.0)

    for name in ("rec", "cons", "nce", "reg", "var", "sup"):
        if name not in terms:
            terms[name] = np.float64(0.0)
    if total is None:
        total = np.float64(0.0)
    return total, terms


def supervised_nll(
    params: Mapping[str, ArrayOrNode], z: ArrayOrNode, y: np.ndarray, cfg: ModelConfig
) -> ArrayOrNode:
    """Mean task NLL at given latents: cross-entropy or heteroscedastic Gaussian."""
    out = task_head(params, z)
    n = y.shape[0]
    if cfg.is_classification:
        lse = dm.logsumexp_rows(out)
        onehot = np.zeros((n, 2))
        onehot[np.arange(n), y.astype(np.int64)] = 1.0
        picked = dm.rowsum(out * dm.lift(out, onehot))
        return (dm.ssum(lse) - dm.ssum(picked)) * (1.0 / n)
    sel_m = dm.lift(out, np.array([[1.0], [0.0]]))
    sel_v = dm.lift(out, np.array([[0.0], [1.0]]))
    mean = out @ sel_m
    log_v = dm.tanh((out @ sel_v) * (1.0 / gs.LOGVAR_MAX)) * gs.LOGVAR_MAX
    target = dm.lift(out, y[:, None])
    nll_rows = (dm.square(target - mean) * dm.exp(log_v * -1.0) + log_v) * 0.5
    return dm.ssum(nll_rows) * (1.0 / n)


# ---------------------------------------------------------------------------
# Single-view convenience wrappers (the building blocks above, batch size 1).
# ---------------------------------------------------------------------------


def _single_view_graph(tape: Tape, params: Params, view: View, cfg: ModelConfig):
    pnodes = lift_params(tape, params)
    mu, lv, ctx = encode_graph(pnodes, pack_views([view], cfg), cfg)
    return pnodes, mu, lv, ctx


def loss_rec(params: Params, view: View, noise: np.ndarray, cfg: ModelConfig) -> float:
    """Reconstruction loss of one view at one reparameterized sample."""
    tape = Tape()
    pnodes, mu, lv, ctx = _single_view_graph(tape, params, view, cfg)
    z = _sample_rows(mu, lv, np.asarray(noise, dtype=np.float64)[None, :])
    val = dm.ssum(_rec_term(pnodes, [view], z, ctx, cfg))
    return float(dm.peek(val))


def loss_cons(params: Params, view_a: View, view_b: View, kind: str, cfg: ModelConfig) -> float:
    """Divergence between the posteriors of two views of the same record."""
    if view_a.record_id != view_b.record_id:
        raise ShapeError(
            f"views come from different records: {view_a.record_id} vs {view_b.record_id}"
        )
    if kind not in CONS_KINDS:
        raise ShapeError(f"unknown consistency kind '{kind}'")
    tape = Tape()
    pnodes = lift_params(tape, params)
    mu_a, lv_a, _ = encode_graph(pnodes, pack_views([view_a], cfg), cfg)
    mu_b, lv_b, _ = encode_graph(pnodes, pack_views([view_b], cfg), cfg)
    rows = _cons_rows(kind, mu_a, lv_a, mu_b, lv_b)
    return float(dm.peek(rows)[0])


def loss_nce(
    params: Params,
    batch_views_a: Sequence[View],
    batch_views_b: Sequence[View],
    tau: float,
    cfg: ModelConfig,
) -> float:
    """Temperature-scaled InfoNCE over aligned view batches (means as features)."""
    if len(batch_views_a) != len(batch_views_b):
        raise ShapeError("view lists must be aligned")
    if len(batch_views_a) < 2:
        raise ShapeError("InfoNCE needs batch size >= 2 (no negatives)")
    tape = Tape()
    pnodes = lift_params(tape, params)
    mu_a, _, _ = encode_graph(pnodes, pack_views(list(batch_views_a), cfg), cfg)
    mu_b, _, _ = encode_graph(pnodes, pack_views(list(batch_views_b), cfg), cfg)
    sim = _cosine_rows(mu_a, mu_b, cfg.d)
    return float(dm.peek(_nce_from_mats(sim, tau, len(batch_views_a))))


def loss_reg(posterior: GaussianPosterior) -> ArrayOrNode:
    """KL of a posterior against the standard normal prior."""
    return gs.kl(posterior, StandardPrior(posterior.d).as_posterior())


def loss_sup(params: Params, record: PatientRecord, noise: np.ndarray, cfg: ModelConfig) -> float:
    """Task NLL of one labeled record at one reparameterized sample."""
    if record.label is None:
        raise ShapeError(f"record {record.id} has no label")
    tape = Tape()
    pnodes = lift_params(tape, params)
    mu, lv, _ = encode_graph(pnodes, pack_records([record], cfg), cfg)
    z = _sample_rows(mu, lv, np.asarray(noise, dtype=np.float64)[None, :])
    val = supervised_nll(pnodes, z, np.array([record.label]), cfg)
    return float(dm.peek(val))


def draw_batch_views(
    records: Sequence[PatientRecord],
    policy: ViewPolicy,
    rng: np.random.Generator,
    d: int,
    ctx_dropout: float = 0.0,
) -> tuple[list[View], list[View], dict[str, np.ndarray]]:
    """Paired views, reparameterization noise and decoder-context keep flags."""
    views_a, views_b = [], []
    for rec in records:
        va, vb = paired_views(rec, policy, rng)
        views_a.append(va)
        views_b.append(vb)
    B = len(records)
    noises = {
        "a": rng.normal(size=(B, d)),
        "b": rng.normal(size=(B, d)),
        "sup": rng.normal(size=(B, d)),
        "ctx_a": (rng.random(B) >= ctx_dropout).astype(np.float64),
        "ctx_b": (rng.random(B) >= ctx_dropout).astype(np.float64),
    }
    return views_a, views_b, noises


def loss_total(
    params: Params,
    records: Sequence[PatientRecord],
    weights: LossWeights,
    policy: ViewPolicy,
    rng: np.random.Generator,
    cfg: ModelConfig,
) -> tuple[float, dict[str, float]]:
    """Value-only evaluation of the combined objective over a batch of records."""
    views_a, views_b, noises = draw_batch_views(
        records, policy, rng, cfg.d, ctx_dropout=weights.ctx_dropout
    )
    labels = np.array(
        [np.nan if r.label is None else float(r.label) for r in records], dtype=np.float64
    )
    total, terms = build_total_loss(
        params, views_a, views_b, noises, weights, cfg, labels=labels, records=records
    )
    breakdown = {k: float(dm.peek(v)) for k, v in terms.items()}
    return float(dm.peek(total)), breakdown


def loss_total_with_grads(
    params: Params,
    records: Sequence[PatientRecord],
    weights: LossWeights,
    policy: ViewPolicy,
    rng: np.random.Generator,
    cfg: ModelConfig,
) -> tuple[float, dict[str, float], Params]:
    """Combined objective plus gradients for every parameter."""
    views_a, views_b, noises = draw_batch_views(
        records, policy, rng, cfg.d, ctx_dropout=weights.ctx_dropout
    )
    labels = np.array(
        [np.nan if r.label is None else float(r.label) for r in records], dtype=np.float64
    )
    tape = Tape()
    pnodes = lift_params(tape, params)
    total, terms = build_total_loss(
        pnodes, views_a, views_b, noises, weights, cfg, labels=labels, records=records
    )
    breakdown = {k: float(dm.peek(v)) for k, v in terms.items()}
    if isinstance(total, Node):
        leaf_grads = tape.backward(total)
        grads = {name: leaf_grads[node.nid] for name, node in pnodes.items()}
        total_val = float(dm.peek(total))
    else:
        grads = {name: np.zeros_like(arr) for name, arr in params.items()}
        total_val = float(total)
    return total_val, breakdown, grads
