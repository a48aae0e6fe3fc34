"""Algebra of diagonal Gaussian posteriors over the latent space.

Divergences, entropy, reparameterized sampling, product-of-experts fusion and
the variance band penalty. All functions accept either plain float64 arrays or
tape nodes for `mean`/`log_var`, so the same closed forms serve training
graphs and inference code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import ArrayOrNode, Node
from .errors import ShapeError

# Raw clamp range for log-variances. Encoders map into it with a smooth tanh
# squash; product-of-experts re-clamps hard after precision summation.
LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0

_LOG_2PI_E = math.log(2.0 * math.pi * math.e)


@dataclass(frozen=True)
class GaussianPosterior:
    """Diagonal Gaussian over a d-dimensional latent state."""

    mean: ArrayOrNode
    log_var: ArrayOrNode

    def __post_init__(self):
        if isinstance(self.mean, Node) or isinstance(self.log_var, Node):
            return
        mean = np.asarray(self.mean, dtype=np.float64)
        log_var = np.asarray(self.log_var, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != log_var.shape:
            raise ShapeError(
                f"posterior needs matching rank-1 mean/log_var, got {mean.shape} and {log_var.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_var))):
            raise ShapeError("posterior parameters must be finite")
        lo, hi = LOGVAR_MIN - 1e-9, LOGVAR_MAX + 1e-9
        if np.any(log_var < lo) or np.any(log_var > hi):
            raise ShapeError(
                f"log_var outside clamp range [{LOGVAR_MIN}, {LOGVAR_MAX}]"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def d(self) -> int:
        return dm.peek(self.mean).shape[-1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(dm.peek(self.log_var))

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * dm.peek(self.log_var))


@dataclass(frozen=True)
class StandardPrior:
    """N(0, I_d); stored implicitly."""

    d: int

    def as_posterior(self) -> GaussianPosterior:
        return GaussianPosterior(np.zeros(self.d), np.zeros(self.d))


def _check_same_d(a: GaussianPosterior, b: GaussianPosterior) -> None:
    da, db = dm.peek(a.mean).shape, dm.peek(b.mean).shape
    if da != db:
        raise ShapeError(f"posterior dimension mismatch: {da} vs {db}")


def kl_terms(a: GaussianPosterior, b: GaussianPosterior) -> ArrayOrNode:
    """Per-dimension KL(a || b) contributions (before the 1/2 factor).

    Each entry is sig2_a/sig2_b + (mu_b - mu_a)^2/sig2_b - 1 + (lv_b - lv_a),
    so any row/full reduction of this tensor times 0.5 gives a KL value.
    """
    ratio = dm.exp(a.log_var - b.log_var)
    sq = dm.square(b.mean - a.mean) * dm.exp(b.log_var * -1.0)
    return ratio + sq + (b.log_var - a.log_var) - 1.0


def kl(a: GaussianPosterior, b: GaussianPosterior) -> ArrayOrNode:
    """Closed-form KL divergence KL(a || b) between diagonal Gaussians."""
    _check_same_d(a, b)
    return dm.ssum(kl_terms(a, b)) * 0.5


def skl(a: GaussianPosterior, b: GaussianPosterior) -> ArrayOrNode:
    """Symmetrized KL: KL(a||b) + KL(b||a)."""
    return kl(a, b) + kl(b, a)


def w2_sq(a: GaussianPosterior, b: GaussianPosterior) -> ArrayOrNode:
    """Squared 2-Wasserstein distance between diagonal Gaussians."""
    _check_same_d(a, b)
    dmu = dm.ssum(dm.square(a.mean - b.mean))
    dsig = dm.ssum(dm.square(dm.exp(a.log_var * 0.5) - dm.exp(b.log_var * 0.5)))
    return dmu + dsig


def entropy(a: GaussianPosterior) -> ArrayOrNode:
    """Differential entropy: 0.5 * sum(log(2*pi*e) + log_var)."""
    return dm.ssum(a.log_var) * 0.5 + 0.5 * a.d * _LOG_2PI_E


def log_det_cov(a: GaussianPosterior) -> ArrayOrNode:
    """Log-determinant of the (diagonal) covariance: sum of log-variances."""
    return dm.ssum(a.log_var)


def sample(a: GaussianPosterior, noise) -> ArrayOrNode:
    """Reparameterized draw mean + std * noise; noise is supplied by the caller."""
    noise_arr = np.asarray(dm.peek(noise), dtype=np.float64)
    if noise_arr.shape != dm.peek(a.mean).shape:
        raise ShapeError(
            f"noise shape {noise_arr.shape} does not match posterior {dm.peek(a.mean).shape}"
        )
    eps = noise if isinstance(noise, Node) else dm.lift(a.mean, noise_arr)
    return a.mean + dm.exp(a.log_var * 0.5) * eps


def clamp_log_var(log_var: ArrayOrNode) -> ArrayOrNode:
    """Hard clamp into the raw range (subgradient-safe on both boundaries)."""
    lower = dm.clampmin(log_var, LOGVAR_MIN)
    return dm.clampmin(lower * -1.0, -LOGVAR_MAX) * -1.0


def poe_fuse(
    experts: Sequence[GaussianPosterior],
    prior: StandardPrior,
    sort_key: Optional[Callable[[GaussianPosterior], object]] = None,
) -> GaussianPosterior:
    """Product-of-experts fusion of diagonal Gaussians with the prior counted once.

    Precisions add: tau* = 1 + sum_s tau_s (prior precision 1), and the fused
    mean is the precision-weighted average of expert means (prior mean 0). An
    empty expert list returns the prior itself, the broadest belief. Passing
    `sort_key` fixes the summation order, making the result bit-exact under
    permutations of the expert list.
    """
    experts = list(experts)
    if not experts:
        return prior.as_posterior()
    for e in experts:
        if e.d != prior.d:
            raise ShapeError(f"expert dimension {e.d} does not match prior {prior.d}")
    if sort_key is not None:
        experts = sorted(experts, key=sort_key)
    tau_total = None
    eta_total = None
    for e in experts:
        tau = dm.exp(e.log_var * -1.0)
        eta = tau * e.mean
        tau_total = tau if tau_total is None else tau_total + tau
        eta_total = eta if eta_total is None else eta_total + eta
    tau_star = tau_total + 1.0
    inv_tau = dm.exp(dm.log(tau_star) * -1.0)
    mean = eta_total * inv_tau
    log_var = clamp_log_var(dm.log(tau_star) * -1.0)
    if isinstance(mean, Node):
        return GaussianPosterior(mean, log_var)
    return GaussianPosterior(np.asarray(mean), np.asarray(log_var))


def var_penalty(a: GaussianPosterior, sigma_min: float, sigma_max: float) -> ArrayOrNode:
    """Hinge penalty keeping per-dimension std inside [sigma_min, sigma_max]."""
    if not (0.0 < sigma_min < sigma_max):
        raise ShapeError(
            f"invalid variance band: sigma_min={sigma_min}, sigma_max={sigma_max}"
        )
    sigma = dm.exp(a.log_var * 0.5)
    return dm.ssum(dm.relu(sigma * -1.0 + sigma_min) + dm.relu(sigma + (-sigma_max)))


# Row-wise variants over (B, d) stacked parameters; used by the batched
# training objectives where each row is one record's posterior.


def kl_rows(mu_a, lv_a, mu_b, lv_b) -> ArrayOrNode:
    ratio = dm.exp(lv_a - lv_b)
    sq = dm.square(mu_b - mu_a) * dm.exp(lv_b * -1.0)
    terms = ratio + sq + (lv_b - lv_a) - 1.0
    return dm.rowsum(terms) * 0.5


def skl_rows(mu_a, lv_a, mu_b, lv_b) -> ArrayOrNode:
    return kl_rows(mu_a, lv_a, mu_b, lv_b) + kl_rows(mu_b, lv_b, mu_a, lv_a)


def w2_sq_rows(mu_a, lv_a, mu_b, lv_b) -> ArrayOrNode:
    dmu = dm.rowsum(dm.square(mu_a - mu_b))
    dsig = dm.rowsum(dm.square(dm.exp(lv_a * 0.5) - dm.exp(lv_b * 0.5)))
    return dmu + dsig


def var_penalty_rows(lv, sigma_min: float, sigma_max: float) -> ArrayOrNode:
    sigma = dm.exp(lv * 0.5)
    return dm.rowsum(dm.relu(sigma * -1.0 + sigma_min) + dm.relu(sigma + (-sigma_max)))


def entropy_rows(lv) -> np.ndarray:
    """Per-row posterior entropy for stacked (B, d) log-variances (numpy only)."""
    lv = np.asarray(lv, dtype=np.float64)
    return 0.5 * (lv.shape[1] * _LOG_2PI_E + np.sum(lv, axis=1))
