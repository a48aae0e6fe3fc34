"""Shared fixtures and finite-difference helpers."""

from __future__ import annotations

import numpy as np
import pytest

from latentset.diffmath import Tape
from latentset.encoder import ModelConfig, PatientRecord, init_params
from latentset.seeding import derive_rng


def eval_loss(build, arrays):
    """Run a graph builder on fresh leaves and return the scalar loss value."""
    tape = Tape()
    nodes = [tape.leaf(a) for a in arrays]
    return float(build(tape, nodes).value)


def fd_grads(build, arrays, eps=1e-5):
    """Central finite differences of a scalar-valued graph builder."""
    out = []
    for k in range(len(arrays)):
        g = np.zeros_like(arrays[k])
        it = np.nditer(g, flags=["multi_index"], op_flags=["writeonly"])
        for _ in it:
            idx = it.multi_index
            plus = [a.copy() for a in arrays]
            plus[k][idx] += eps
            minus = [a.copy() for a in arrays]
            minus[k][idx] -= eps
            g[idx] = (eval_loss(build, plus) - eval_loss(build, minus)) / (2 * eps)
        out.append(g)
    return out


def rel_err(a, b, floor=1e-3):
    """Max entrywise relative error with an absolute floor for tiny entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def tape_grad_check(build, arrays, eps=1e-5, tol=1e-6):
    """Assert analytic gradients match central finite differences."""
    tape = Tape()
    nodes = [tape.leaf(a) for a in arrays]
    loss = build(tape, nodes)
    grads = tape.backward(loss)
    analytic = [grads[n.nid] for n in nodes]
    numeric = fd_grads(build, arrays, eps=eps)
    for an, fd in zip(analytic, numeric):
        err = rel_err(an, fd)
        assert err < tol, f"gradient mismatch: rel err {err}"


@pytest.fixture
def tiny_cfg():
    return ModelConfig(
        d=4, embed=8, hidden=8, n_modalities=3, modality_dims=(5, 4, 6), task="binary"
    )


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, derive_rng(0, "tiny-params"))


def make_records(cfg: ModelConfig, n: int, seed: int = 1, labeled=True):
    records = []
    for i in range(n):
        rng = derive_rng(seed, "record", i)
        records.append(
            PatientRecord(
                id=f"t{i:04d}",
                modalities=tuple(rng.normal(size=p) for p in cfg.modality_dims),
                mask=np.ones(cfg.n_modalities, dtype=np.int8),
                label=float(i % 2) if labeled else None,
            )
        )
    return records


@pytest.fixture
def tiny_records(tiny_cfg):
    return make_records(tiny_cfg, 6)
