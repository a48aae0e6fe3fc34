"""Optimization loop: AdamW, cosine schedule with warmup, checkpoints.

Training is single-process and fully deterministic: batch shuffles, view
draws and reparameterization noise all derive from the run seed, so two runs
with the same config produce identical loss logs and final parameters.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import diffmath as dm
from .diffmath import Tape
from .encoder import ModelConfig, Params, PatientRecord, encode_graph, pack_records
from .errors import CheckpointError, NonFiniteError, ShapeError
from .objectives import (
    LossWeights,
    build_total_loss,
    lift_params,
    loss_total_with_grads,
    supervised_nll,
    _sample_rows,
    task_head,
)
from .seeding import derive_rng
from .viewgen import ViewPolicy, paired_views

LOSS_CSV_HEADER = "epoch,step,total,rec,cons,nce,reg,var,sup,lr"

FINETUNE_MODES = ("frozen", "head_calibration", "full")


@dataclass(frozen=True)
class OptimConfig:
    """AdamW hyperparameters and schedule shape."""

    lr: float = 3e-4
    warmup: int = 200
    epochs: int = 30
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    val_fraction: float = 0.1
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    label_fraction: float = 1.0
    cal_fraction: float = 0.2

    def __post_init__(self):
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ShapeError("lr and clip_norm must be positive")
        if not (0 <= self.val_fraction < 1 and 0 < self.label_fraction <= 1):
            raise ShapeError("fractions out of range")


def lr_at(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup to `base`, then cosine decay to zero at `total`."""
    if step < 0:
        raise ShapeError("schedule step must be non-negative")
    step = min(step, total)
    if warmup > 0 and step < warmup:
        return base * step / warmup
    if total <= warmup:
        return base
    progress = (step - warmup) / (total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: Params, clip: float) -> tuple[Params, float]:
    """Scale all gradients so their joint L2 norm is at most `clip`."""
    total_sq = 0.0
    for g in grads.values():
        total_sq += float(np.sum(g * g))
    norm = math.sqrt(total_sq)
    if norm <= clip or norm == 0.0:
        return grads, norm
    factor = clip / norm
    return {k: g * factor for k, g in grads.items()}, norm


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Only names in `trainable` are updated; decay is applied before the moment
    update, and gradients are clipped on their global norm first.
    """

    def __init__(self, cfg: OptimConfig, param_shapes: dict[str, tuple[int, ...]],
                 trainable: Optional[set[str]] = None):
        self.cfg = cfg
        self.trainable = set(param_shapes) if trainable is None else set(trainable)
        self.m = {k: np.zeros(s) for k, s in param_shapes.items() if k in self.trainable}
        self.v = {k: np.zeros(s) for k, s in param_shapes.items() if k in self.trainable}
        self.step_count = 0

    def step(self, params: Params, grads: Params, lr: float) -> Params:
        for name in sorted(self.trainable):
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        sub = {k: grads[k] for k in self.trainable}
        sub, _ = clip_global_norm(sub, self.cfg.clip_norm)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        out = dict(params)
        for name in sorted(self.trainable):
            g = sub[name]
            p = params[name] * (1.0 - lr * self.cfg.weight_decay)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.cfg.eps)
            out[name] = p - lr * update
        return out


def adamw_step(params: Params, grads: Params, opt: AdamW, lr: float) -> Params:
    """Functional wrapper over AdamW.step for one update."""
    return opt.step(params, grads, lr)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + little-endian float binary blob.
# ---------------------------------------------------------------------------

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(
    prefix: Path | str,
    params: Params,
    config_hash: str,
    step: int,
    dtype: str = "float64",
    extra: Optional[dict] = None,
) -> tuple[Path, Path]:
    """Write `<prefix>.manifest.json` and `<prefix>.params.bin` (manifest order)."""
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype '{dtype}'")
    prefix = Path(prefix)
    names = sorted(params)
    manifest = {
        "version": 1,
        "dtype": dtype,
        "config_hash": config_hash,
        "step": step,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = b"".join(np.ascontiguousarray(params[n], dtype=_DTYPES[dtype]).tobytes() for n in names)
    man_path = prefix.with_suffix(".manifest.json")
    bin_path = prefix.with_suffix(".params.bin")
    man_path.parent.mkdir(parents=True, exist_ok=True)
    man_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    bin_path.write_bytes(blob)
    return man_path, bin_path


def load_checkpoint(prefix: Path | str) -> tuple[Params, dict]:
    prefix = Path(prefix)
    man_path = prefix.with_suffix(".manifest.json")
    bin_path = prefix.with_suffix(".params.bin")
    if not man_path.exists() or not bin_path.exists():
        raise CheckpointError(f"missing checkpoint files at prefix '{prefix}'")
    manifest = json.loads(man_path.read_text())
    dtype = manifest.get("dtype", "float64")
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype '{dtype}'")
    itemsize = np.dtype(_DTYPES[dtype]).itemsize
    blob = bin_path.read_bytes()
    expected = sum(int(np.prod(e["shape"])) for e in manifest["params"]) * itemsize
    if len(blob) != expected:
        raise CheckpointError(
            f"blob length {len(blob)} does not match manifest total {expected}"
        )
    params: Params = {}
    offset = 0
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype=_DTYPES[dtype], count=count, offset=offset)
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        offset += count * itemsize
    return params, manifest


def check_checkpoint_shapes(manifest: dict, params: Params, config_hash: Optional[str] = None):
    """Reject incompatible checkpoints with an explicit manifest diff."""
    want = {n: tuple(params[n].shape) for n in params}
    got = {e["name"]: tuple(e["shape"]) for e in manifest["params"]}
    diff = []
    for name in sorted(set(want) | set(got)):
        if name not in got:
            diff.append(f"missing from checkpoint: {name} {want[name]}")
        elif name not in want:
            diff.append(f"unexpected in checkpoint: {name} {got[name]}")
        elif want[name] != got[name]:
            diff.append(f"shape mismatch for {name}: config {want[name]} vs checkpoint {got[name]}")
    if config_hash is not None and manifest.get("config_hash") != config_hash:
        diff.append(
            f"config hash mismatch: expected {config_hash}, checkpoint has "
            f"{manifest.get('config_hash')}"
        )
    if diff:
        raise CheckpointError("incompatible checkpoint:\n  " + "\n  ".join(diff))


# ---------------------------------------------------------------------------
# Pretraining.
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    final_params: Params
    best_params: Params
    best_epoch: int
    log_rows: list[tuple]
    val_history: list[float]


def _batches(n: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    """Contiguous batches over a permutation; a trailing singleton is merged
    into the previous batch so InfoNCE always has a negative."""
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def validation_objective(
    params: Params,
    records: Sequence[PatientRecord],
    weights: LossWeights,
    policy: ViewPolicy,
    cfg: ModelConfig,
    seed: int,
) -> float:
    """Held-out consistency + reconstruction under per-record frozen views."""
    if not records:
        return 0.0
    probe = dataclasses.replace(
        weights, lambda_rec=1.0, lambda_cons=1.0, lambda_reg=0.0,
        lambda_nce=0.0, lambda_sup=0.0, lambda_var=0.0,
    )  # keeps the run's ctx_dropout
    views_a, views_b, noises = [], [], {"a": [], "b": [], "ctx_a": [], "ctx_b": []}
    for rec in records:
        rng = derive_rng(seed, "val-views", rec.id)
        va, vb = paired_views(rec, policy, rng)
        views_a.append(va)
        views_b.append(vb)
        noises["a"].append(rng.normal(size=cfg.d))
        noises["b"].append(rng.normal(size=cfg.d))
        # context flags mirror the training-time dropout so the validation
        # reconstruction measures the model as it is actually trained
        noises["ctx_a"].append(float(rng.random() >= weights.ctx_dropout))
        noises["ctx_b"].append(float(rng.random() >= weights.ctx_dropout))
    noise_arrs = {k: np.stack(v) if k in ("a", "b") else np.asarray(v)
                  for k, v in noises.items()}
    total, _ = build_total_loss(params, views_a, views_b, noise_arrs, probe, cfg,
                                records=list(records))
    return float(dm.peek(total))


def pretrain(
    params: Params,
    records: Sequence[PatientRecord],
    cfg: ModelConfig,
    weights: LossWeights,
    policy: ViewPolicy,
    optim: OptimConfig,
    seed: int,
) -> PretrainResult:
    """Self-supervised pretraining over shuffled minibatches.

    Tracks the best checkpoint by held-out consistency + reconstruction and
    aborts with diagnostics if the loss goes non-finite.
    """
    records = list(records)
    n_val = int(len(records) * optim.val_fraction)
    train = records[: len(records) - n_val]
    val = records[len(records) - n_val :]
    if not train:
        raise ShapeError("no training records after validation split")

    steps_per_epoch = max(1, len(_batches(len(train), optim.batch_size, np.arange(len(train)))))
    total_steps = max(1, optim.epochs * steps_per_epoch)
    opt = AdamW(optim, {k: v.shape for k, v in params.items()})
    log_rows: list[tuple] = []
    val_history: list[float] = []
    best_params = {k: v.copy() for k, v in params.items()}
    best_val = math.inf
    best_epoch = -1
    global_step = 0

    for epoch in range(optim.epochs):
        order = derive_rng(seed, "shuffle", epoch).permutation(len(train))
        for batch_idx, batch in enumerate(_batches(len(train), optim.batch_size, order)):
            batch_records = [train[i] for i in batch]
            rng = derive_rng(seed, "step", epoch, batch_idx)
            total, terms, grads = loss_total_with_grads(
                params, batch_records, weights, policy, rng, cfg
            )
            if not math.isfinite(total):
                detail = ", ".join(f"{k}={v}" for k, v in terms.items())
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch} step {global_step}: {detail}"
                )
            lr = lr_at(global_step + 1, optim.lr, optim.warmup, total_steps)
            params = opt.step(params, grads, lr)
            global_step += 1
            log_rows.append(
                (epoch, global_step, total, terms["rec"], terms["cons"], terms["nce"],
                 terms["reg"], terms["var"], terms["sup"], lr)
            )
        val_loss = validation_objective(params, val, weights, policy, cfg, seed)
        val_history.append(val_loss)
        if val and val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}

    if best_epoch < 0:  # no validation set or zero epochs: final weights are best
        best_params = {k: v.copy() for k, v in params.items()}
    return PretrainResult(
        final_params=params,
        best_params=best_params,
        best_epoch=best_epoch,
        log_rows=log_rows,
        val_history=val_history,
    )


def write_loss_csv(path: Path | str, rows: Sequence[tuple]) -> None:
    lines = [LOSS_CSV_HEADER]
    for epoch, step, *vals in rows:
        lines.append(f"{epoch},{step}," + ",".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Fine-tuning and temperature calibration.
# ---------------------------------------------------------------------------


def labeled_subset(records: Sequence[PatientRecord], fraction: float, seed: int) -> list[PatientRecord]:
    """Deterministic per-record coin flips selecting the labeled fraction."""
    if fraction >= 1.0:
        return [r for r in records if r.label is not None]
    out = []
    for rec in records:
        if rec.label is None:
            continue
        if derive_rng(seed, "label-mask", rec.id).random() < fraction:
            out.append(rec)
    return out


def _encode_records(pnodes, batch, cfg):
    return encode_graph(pnodes, pack_records(list(batch), cfg), cfg)


def _supervised_grads(
    params: Params, batch: Sequence[PatientRecord], cfg: ModelConfig, rng: np.random.Generator
) -> tuple[float, Params]:
    tape = Tape()
    pnodes = lift_params(tape, params)
    mu, lv, _ = _encode_records(pnodes, batch, cfg)
    noise = np.zeros((len(batch), cfg.d)) if cfg.deterministic else rng.normal(size=(len(batch), cfg.d))
    z = _sample_rows(mu, lv, noise)
    y = np.asarray([r.label for r in batch], dtype=np.float64)
    loss = supervised_nll(pnodes, z, y, cfg)
    leaf_grads = tape.backward(loss)
    grads = {name: leaf_grads[node.nid] for name, node in pnodes.items()}
    return float(dm.peek(loss)), grads


def fit_temperature(logits: np.ndarray, labels: np.ndarray) -> float:
    """Single-scalar temperature minimizing NLL of `logits / T` on held-out data."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("logits must be (n, C) aligned with labels")
    idx = np.arange(len(labels))

    def nll_at(log_t: float) -> float:
        scaled = logits / math.exp(log_t)
        lse = dm.logsumexp_rows(scaled)
        return float(np.mean(lse - scaled[idx, labels]))

    res = minimize_scalar(nll_at, bounds=(-4.0, 4.0), method="bounded",
                          options={"xatol": 1e-8})
    return float(math.exp(res.x))


@dataclass
class FinetuneResult:
    params: Params
    mode: str
    temperature: float
    log_rows: list[tuple]


def finetune(
    params: Params,
    records: Sequence[PatientRecord],
    cfg: ModelConfig,
    weights: LossWeights,
    policy: ViewPolicy,
    optim: OptimConfig,
    seed: int,
    mode: str = "frozen",
    epochs: Optional[int] = None,
) -> FinetuneResult:
    """Adapt a pretrained model to the labeled task.

    frozen: only the task head trains. head_calibration: task head plus a
    scalar temperature fitted afterwards on a held-out calibration split.
    full: everything trains under the combined objective with the supervised
    weight forced to 1.
    """
    if mode not in FINETUNE_MODES:
        raise ShapeError(f"unknown finetune mode '{mode}'")
    params = dict(params)
    epochs = optim.finetune_epochs if epochs is None else epochs
    labeled = labeled_subset(records, optim.label_fraction, seed)
    cal: list[PatientRecord] = []
    if mode == "head_calibration":
        n_cal = max(1, int(len(labeled) * optim.cal_fraction)) if labeled else 0
        cal = labeled[len(labeled) - n_cal :]
        labeled = labeled[: len(labeled) - n_cal]

    trainable = set(params) if mode == "full" else {
        k for k in params if k.startswith("task.") and k != "task.log_temp"
    }
    opt = AdamW(optim, {k: v.shape for k, v in params.items()}, trainable=trainable)
    steps_per_epoch = max(1, len(_batches(len(labeled), optim.batch_size, np.arange(len(labeled))))) if labeled else 1
    total_steps = max(1, epochs * steps_per_epoch)
    full_weights = dataclasses.replace(weights, lambda_sup=1.0)
    log_rows: list[tuple] = []
    global_step = 0

    for epoch in range(epochs):
        if not labeled:
            break
        order = derive_rng(seed, "ft-shuffle", epoch).permutation(len(labeled))
        for batch_idx, batch in enumerate(_batches(len(labeled), optim.batch_size, order)):
            batch_records = [labeled[i] for i in batch]
            rng = derive_rng(seed, "ft-step", epoch, batch_idx)
            if mode == "full":
                total, terms, grads = loss_total_with_grads(
                    params, batch_records, full_weights, policy, rng, cfg
                )
            else:
                total, grads = _supervised_grads(params, batch_records, cfg, rng)
                terms = {"sup": total}
            if not math.isfinite(total):
                raise NonFiniteError(f"non-finite finetune loss at epoch {epoch}")
            lr = lr_at(global_step + 1, optim.finetune_lr, min(optim.warmup, total_steps // 10),
                       total_steps)
            params = opt.step(params, grads, lr)
            global_step += 1
            log_rows.append((epoch, global_step, total, terms.get("sup", 0.0), lr))

    temperature = 1.0
    if mode == "head_calibration" and cal and cfg.is_classification:
        mu, lv, _ = _encode_records(params, cal, cfg)
        rng = derive_rng(seed, "cal-noise")
        noise = np.zeros((len(cal), cfg.d)) if cfg.deterministic else rng.normal(size=(len(cal), cfg.d))
        z = _sample_rows(np.asarray(mu), np.asarray(lv), noise)
        logits = np.asarray(task_head(params, z))
        labels = np.asarray([r.label for r in cal], dtype=np.int64)
        temperature = fit_temperature(logits, labels)
        params["task.log_temp"] = np.array([math.log(temperature)])
    return FinetuneResult(params=params, mode=mode, temperature=temperature, log_rows=log_rows)
