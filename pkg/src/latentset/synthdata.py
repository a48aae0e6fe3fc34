"""Linear-Gaussian synthetic records with an exact Bayesian posterior oracle.

Records are generated as z ~ N(0, I_d), x_m = W_m z + noise, so the posterior
over z given any modality subset has a closed form. That makes every
distributional claim in the library checkable: learned posteriors can be
compared against the truth, and fused per-modality beliefs against the
all-modality posterior.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.linalg import cho_solve
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm

from .encoder import PatientRecord
from .errors import DataError, ShapeError
from .gaussians import GaussianPosterior
from .metrics import MetricsReport, auprc, auroc, ece, mse, nll
from .seeding import derive_rng
from .viewgen import mask_for_index, sweep_masks

# Intercepts are solved so binary tasks sit near this positive rate; class
# imbalance keeps AUPRC informative.
POSITIVE_RATE = 0.30

TASKS = ("binary", "binary_threshold", "regression")


@dataclass(frozen=True)
class GeneratorSpec:
    """Frozen description of one synthetic population."""

    d: int = 8
    n_modalities: int = 3
    modality_dims: tuple[int, ...] = (16, 16, 16)
    noise_std: tuple[float, ...] = (0.5, 0.5, 0.5)
    task: str = "binary"
    n: int = 5000
    seed: int = 0
    w_mode: str = "diagdom"
    task_noise_std: float = 0.1

    def __post_init__(self):
        if len(self.modality_dims) != self.n_modalities:
            raise DataError("modality_dims does not match n_modalities")
        if len(self.noise_std) != self.n_modalities:
            raise DataError("noise_std does not match n_modalities")
        if any(s <= 0 for s in self.noise_std):
            raise DataError("observation noise must be strictly positive")
        if self.task not in TASKS:
            raise DataError(f"unknown task '{self.task}'")
        if self.w_mode not in ("diagdom", "diagonal", "identity"):
            raise DataError(f"unknown w_mode '{self.w_mode}'")
        if self.w_mode in ("diagonal", "identity") and any(
            p != self.d for p in self.modality_dims
        ):
            raise DataError(f"{self.w_mode} w_mode needs modality_dims equal to d")
        if self.n < 0:
            raise DataError("record count must be non-negative")


@dataclass(frozen=True)
class ExactPosterior:
    """Full-covariance Gaussian posterior over the true latent state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        cov = 0.5 * (cov + cov.T)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ShapeError(f"bad posterior shapes: {mean.shape}, {cov.shape}")
        np.linalg.cholesky(cov)  # SPD or bust
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def diagonalized(self) -> GaussianPosterior:
        """Marginal (diagonal) view of this posterior."""
        return GaussianPosterior(self.mean, np.log(np.diag(self.cov)))


@dataclass(frozen=True)
class _Structure:
    observation: tuple[np.ndarray, ...]
    task_w: np.ndarray
    task_b: float
    task_v: np.ndarray


def _solve_binary_intercept(scale: float) -> float:
    """Intercept making E[sigmoid(scale * u + b)] hit POSITIVE_RATE for u ~ N(0,1)."""

    def expected_rate(b: float) -> float:
        val, _ = quad(lambda u: expit(scale * u + b) * norm.pdf(u), -12.0, 12.0)
        return val - POSITIVE_RATE

    return float(brentq(expected_rate, -40.0, 40.0, xtol=1e-12))


@lru_cache(maxsize=64)
def _structure(spec: GeneratorSpec) -> _Structure:
    rng = derive_rng(spec.seed, "structure")
    mats = []
    for m, pm in enumerate(spec.modality_dims):
        if spec.w_mode == "identity":
            mats.append(np.eye(spec.d))
        elif spec.w_mode == "diagonal":
            mats.append(np.diag(rng.uniform(0.5, 1.5, spec.d)))
        else:
            block = np.zeros((pm, spec.d))
            for i in range(pm):
                block[i, i % spec.d] = 1.0
            mats.append(0.8 * block + 0.2 * rng.normal(size=(pm, spec.d)))
    task_w = rng.normal(size=spec.d)
    task_v = rng.normal(size=spec.d)
    scale = float(np.linalg.norm(task_w))
    if spec.task == "binary":
        task_b = _solve_binary_intercept(scale)
    elif spec.task == "binary_threshold":
        task_b = float(scale * norm.ppf(POSITIVE_RATE))
    else:
        task_b = 0.0
    for w in mats:
        w.flags.writeable = False
    return _Structure(tuple(mats), task_w, task_b, task_v)


def observation_matrices(spec: GeneratorSpec) -> tuple[np.ndarray, ...]:
    """Per-modality observation matrices, drawn once per spec seed and frozen."""
    return _structure(spec).observation


def task_map(spec: GeneratorSpec) -> tuple[np.ndarray, float, np.ndarray]:
    """(w, b, v): the binary logit direction/intercept and regression direction."""
    s = _structure(spec)
    return s.task_w, s.task_b, s.task_v


def generate(spec: GeneratorSpec) -> list[PatientRecord]:
    """Sample the full record population for a spec; bit-identical per seed."""
    s = _structure(spec)
    rng = derive_rng(spec.seed, "records")
    z = rng.normal(size=(spec.n, spec.d))
    xs = []
    for m, w in enumerate(s.observation):
        noise = rng.normal(scale=spec.noise_std[m], size=(spec.n, spec.modality_dims[m]))
        xs.append(z @ w.T + noise)
    logits = z @ s.task_w + s.task_b
    if spec.task == "binary":
        labels = (rng.random(spec.n) < expit(logits)).astype(np.float64)
    elif spec.task == "binary_threshold":
        labels = (logits > 0).astype(np.float64)
    else:
        labels = z @ s.task_v + rng.normal(scale=spec.task_noise_std, size=spec.n)
    mask = np.ones(spec.n_modalities, dtype=np.int8)
    records = []
    for i in range(spec.n):
        records.append(
            PatientRecord(
                id=f"r{i:06d}",
                modalities=tuple(xs[m][i] for m in range(spec.n_modalities)),
                mask=mask.copy(),
                label=float(labels[i]),
                z_true=z[i],
            )
        )
    return records


def exact_posterior(spec: GeneratorSpec, record: PatientRecord, mask) -> ExactPosterior:
    """Closed-form Bayesian posterior over z given the masked modalities.

    Precision is I plus the observed modalities' W^T W / sigma^2 terms; the
    system is solved through a Cholesky factorization. An empty mask returns
    the prior.
    """
    s = _structure(spec)
    eff = np.asarray(mask, dtype=np.int8) * record.mask
    lam = np.eye(spec.d)
    eta = np.zeros(spec.d)
    for m, w in enumerate(s.observation):
        if eff[m] == 1:
            inv_var = 1.0 / (spec.noise_std[m] ** 2)
            lam += inv_var * (w.T @ w)
            eta += inv_var * (w.T @ record.modalities[m])
    low = np.linalg.cholesky(lam)
    mean = cho_solve((low, True), eta)
    cov = cho_solve((low, True), np.eye(spec.d))
    return ExactPosterior(mean=mean, cov=cov)


def likelihood_expert(spec: GeneratorSpec, record: PatientRecord, m: int) -> GaussianPosterior:
    """Single-modality evidence in diagonal-Gaussian form, prior excluded.

    Fusing these experts with `poe_fuse` (which contributes the prior exactly
    once) reproduces the all-modality exact posterior whenever W^T W is
    diagonal. Raises for non-diagonal specs, where no diagonal expert is exact.
    """
    s = _structure(spec)
    w = s.observation[m]
    gram = w.T @ w
    off = gram - np.diag(np.diag(gram))
    if np.max(np.abs(off)) > 1e-12:
        raise ShapeError(f"modality {m} has non-diagonal W^T W; no exact diagonal expert")
    inv_var = 1.0 / (spec.noise_std[m] ** 2)
    tau = np.diag(gram) * inv_var
    if np.any(tau <= 0):
        raise ShapeError(f"modality {m} carries no evidence on some latent dimension")
    eta = inv_var * (w.T @ record.modalities[m])
    return GaussianPosterior(eta / tau, -np.log(tau))


def posterior_samples(post: ExactPosterior, rng: np.random.Generator, n: int) -> np.ndarray:
    low = np.linalg.cholesky(post.cov)
    eps = rng.normal(size=(n, post.d))
    return post.mean[None, :] + eps @ low.T


def bayes_optimal_metrics(
    spec: GeneratorSpec,
    records: list[PatientRecord],
    mask_level: float = 0.0,
    mask_override: np.ndarray | None = None,
    n_mc: int = 1000,
) -> MetricsReport:
    """Metrics of the exact-posterior predictor at a missingness level.

    Each record's exact posterior is pushed through the true task map with
    Monte Carlo samples; the resulting scores upper-bound what any learned
    encoder of the same evidence can achieve (in expectation).
    """
    s = _structure(spec)
    if mask_override is not None:
        masks = [np.asarray(mask_override, dtype=np.int8)]
    else:
        masks = sweep_masks(spec.n_modalities, mask_level)
    scores = np.zeros(len(records))
    labels = np.zeros(len(records))
    for i, rec in enumerate(records):
        post = exact_posterior(spec, rec, mask_for_index(masks, i))
        rng = derive_rng(spec.seed, "bayes-mc", rec.id)
        z = posterior_samples(post, rng, n_mc)
        if spec.task == "binary":
            scores[i] = float(np.mean(expit(z @ s.task_w + s.task_b)))
        elif spec.task == "binary_threshold":
            scores[i] = float(np.mean((z @ s.task_w + s.task_b) > 0))
        else:
            scores[i] = float(np.mean(z @ s.task_v))
        labels[i] = rec.label
    meta = {"mask_level": mask_level, "n_mc": n_mc, "task": spec.task, "predictor": "bayes"}
    if spec.task == "regression":
        out = {"mse": mse(labels, scores)}
    else:
        out = {
            "auroc": auroc(labels, scores),
            "auprc": auprc(labels, scores),
            "nll": nll(labels, scores),
            "ece": ece(labels, scores),
        }
    return MetricsReport(metrics=out, meta=meta)
