"""Stochastic partial-view generation and deterministic missingness sweeps.

A view is a degraded copy of a record: whole modalities dropped, plus
individual feature entries held out within the kept modalities. Held-out
entries are the reconstruction targets. Evaluation-time missingness uses
fixed round-robin mask cycles instead of RNG so sweeps are exactly
reproducible.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import PatientRecord
from .errors import NoEvidenceError, ShapeError

_MAX_REDRAWS = 100


@dataclass(frozen=True)
class ViewPolicy:
    """Degradation probabilities for sampled views."""

    p_modality_drop: float = 0.3
    p_feature_drop: float = 0.15
    min_keep: int = 1
    stream: str = "views"

    def __post_init__(self):
        if not (0.0 <= self.p_modality_drop < 1.0 and 0.0 <= self.p_feature_drop <= 1.0):
            raise ShapeError(
                f"drop probabilities out of range: {self.p_modality_drop}, {self.p_feature_drop}"
            )
        if self.min_keep < 1:
            raise ShapeError("min_keep must be at least 1")


@dataclass(frozen=True)
class View:
    """One degraded copy of a record plus its held-out reconstruction targets."""

    record_id: str
    mask: np.ndarray                       # (M,) modality keep flags
    keep: tuple[np.ndarray, ...]           # per modality, (p_m,) feature keep-mask
    x_obs: tuple[np.ndarray, ...]          # per modality, surviving values (zero-filled)
    x_hold: tuple[np.ndarray, ...]         # per modality, held-out values (zero elsewhere)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.int8)
        object.__setattr__(self, "mask", mask)
        if not np.any(mask == 1):
            raise ShapeError(f"view of record {self.record_id} keeps no modality")
        for m, flag in enumerate(mask):
            keep = self.keep[m]
            hold = 1.0 - keep
            if flag == 0:
                if np.any(keep != 0) or np.any(self.x_obs[m] != 0) or np.any(self.x_hold[m] != 0):
                    raise ShapeError("dropped modality carries content")
                continue
            # keep/hold must partition the features of every kept modality
            if np.any((keep != 0) & (keep != 1)):
                raise ShapeError("keep mask must be binary")
            if np.any(self.x_obs[m] * hold != 0) or np.any(self.x_hold[m] * keep != 0):
                raise ShapeError("keep/hold feature partition is inconsistent")

    @property
    def n_held_out(self) -> int:
        total = 0
        for m, flag in enumerate(self.mask):
            if flag:
                total += int(np.sum(1.0 - self.keep[m]))
        return total


def sample_view(record: PatientRecord, policy: ViewPolicy, rng: np.random.Generator) -> View:
    """Draw one stochastic partial view of a record.

    Modalities observed in the record are dropped independently; draws that
    keep fewer than `min_keep` are redrawn (up to a bound, then a uniform
    subset is force-kept so the call always terminates). Within kept
    modalities, feature entries are held out independently.
    """
    candidates = [m for m in range(record.n_modalities) if record.mask[m] == 1]
    if not candidates:
        raise NoEvidenceError(f"record {record.id} has no observed modality")

    kept: list[int] = []
    for _ in range(_MAX_REDRAWS):
        draws = rng.random(len(candidates))
        kept = [m for m, u in zip(candidates, draws) if u >= policy.p_modality_drop]
        if len(kept) >= policy.min_keep:
            break
    else:
        take = min(policy.min_keep, len(candidates))
        kept = sorted(rng.choice(candidates, size=take, replace=False).tolist())

    kept_set = set(kept)
    mask = np.zeros(record.n_modalities, dtype=np.int8)
    keeps, obs, holds = [], [], []
    for m in range(record.n_modalities):
        x = record.modalities[m]
        if m in kept_set:
            mask[m] = 1
            hold = (rng.random(x.shape[0]) < policy.p_feature_drop).astype(np.float64)
            keep = 1.0 - hold
            keeps.append(keep)
            obs.append(x * keep)
            holds.append(x * hold)
        else:
            keeps.append(np.zeros_like(x))
            obs.append(np.zeros_like(x))
            holds.append(np.zeros_like(x))
    return View(
        record_id=record.id,
        mask=mask,
        keep=tuple(keeps),
        x_obs=tuple(obs),
        x_hold=tuple(holds),
    )


def paired_views(
    record: PatientRecord, policy: ViewPolicy, rng: np.random.Generator
) -> tuple[View, View]:
    """Two independent stochastic views of the same record."""
    return sample_view(record, policy, rng), sample_view(record, policy, rng)


def sweep_masks(n_modalities: int, level: float) -> list[np.ndarray]:
    """Deterministic mask cycle for a missingness level.

    Drops round(level * M) modalities per mask, cycling through every
    combination in lexicographic order; record i uses mask i mod cycle length.
    No RNG is involved.
    """
    if not (0.0 <= level < 1.0):
        raise ShapeError(f"mask level {level} out of range [0, 1)")
    if math.ceil(level * n_modalities) >= n_modalities:
        raise ShapeError(
            f"mask level {level} would drop all {n_modalities} modalities"
        )
    k = round(level * n_modalities)
    masks = []
    for combo in itertools.combinations(range(n_modalities), k):
        mask = np.ones(n_modalities, dtype=np.int8)
        mask[list(combo)] = 0
        masks.append(mask)
    return masks


def mask_for_index(masks: Sequence[np.ndarray], index: int) -> np.ndarray:
    """Round-robin assignment of sweep masks to record indices."""
    return masks[index % len(masks)]
