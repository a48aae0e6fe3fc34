"""Run configuration: schema validation, canonical hashing, section parsing.

A run config is one JSON document with sections data / model / weights /
policy / optim / eval plus a root seed. Unknown keys are rejected so typos
fail loudly. The config hash is the SHA-256 of the canonicalized document and
is embedded in every output file; downstream commands refuse inputs whose
hashes disagree.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .encoder import ModelConfig
from .errors import ConfigError
from .objectives import LossWeights
from .synthdata import GeneratorSpec
from .trainer import OptimConfig
from .viewgen import ViewPolicy

_SCHEMA: dict[str, dict[str, object]] = {
    "data": {
        "kind": "synthetic",
        "path": None,
        "d": 8,
        "M": 3,
        "p_m": [16, 16, 16],
        "noise_std": 0.5,
        "task": "binary",
        "n": 5000,
        "seed": 0,
        "w_mode": "diagdom",
        "task_noise_std": 0.1,
    },
    "model": {
        "d": 8,
        "embed": 32,
        "hidden": 64,
        "head_hidden": 32,
        "deterministic": False,
    },
    "weights": {
        "lambda_rec": 1.0,
        "lambda_cons": 1.0,
        "lambda_reg": 0.01,
        "lambda_nce": 0.1,
        "lambda_sup": 0.0,
        "lambda_var": 0.1,
        "tau": 0.1,
        "sigma_min": 0.05,
        "sigma_max": 5.0,
        "mc_samples": 8,
        "cons_kind": "skl",
        "cons_mode": "pairwise",
        "nce_on_samples": False,
        "ctx_dropout": 0.5,
    },
    "policy": {
        "p_modality_drop": 0.3,
        "p_feature_drop": 0.15,
        "min_keep": 1,
    },
    "optim": {
        "lr": 3e-4,
        "warmup": 200,
        "epochs": 30,
        "batch_size": 64,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 0.01,
        "clip_norm": 1.0,
        "val_fraction": 0.1,
        "finetune_epochs": 10,
        "finetune_lr": 1e-3,
        "label_fraction": 1.0,
        "cal_fraction": 0.2,
    },
    "eval": {
        "k": 8,
        "bins": 15,
        "mask_levels": [0.0, 0.25, 0.5, 0.75],
        "holdout_fraction": 0.2,
    },
}


def default_config() -> dict:
    """A complete config document with every default filled in."""
    doc = {section: dict(fields) for section, fields in _SCHEMA.items()}
    doc["seed"] = 0
    return doc


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def _merge_section(name: str, given: dict) -> dict:
    defaults = _SCHEMA[name]
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(given)
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration plus its canonical hash and effective seed."""

    doc: dict
    hash: str
    seed: int
    data: dict
    model_doc: dict
    weights: LossWeights
    policy: ViewPolicy
    optim: OptimConfig
    eval: dict

    def generator_spec(self) -> GeneratorSpec:
        d = self.data
        if d["kind"] != "synthetic":
            raise ConfigError("config data section is a file path, not a generator spec")
        noise = d["noise_std"]
        if isinstance(noise, (int, float)):
            noise = [float(noise)] * int(d["M"])
        return GeneratorSpec(
            d=int(d["d"]),
            n_modalities=int(d["M"]),
            modality_dims=tuple(int(p) for p in d["p_m"]),
            noise_std=tuple(float(s) for s in noise),
            task=str(d["task"]),
            n=int(d["n"]),
            seed=int(d["seed"]),
            w_mode=str(d["w_mode"]),
            task_noise_std=float(d["task_noise_std"]),
        )

    def model_config(self, manifest: Optional[dict] = None) -> ModelConfig:
        """Resolve architecture dims, taking modality info from data or manifest."""
        if manifest is not None:
            m, p_m, task = manifest["M"], manifest["p_m"], manifest["task"]
        elif self.data["kind"] == "synthetic":
            m, p_m, task = self.data["M"], self.data["p_m"], self.data["task"]
        else:
            raise ConfigError("file-backed data needs a dataset manifest to resolve dims")
        return ModelConfig(
            d=int(self.model_doc["d"]),
            embed=int(self.model_doc["embed"]),
            hidden=int(self.model_doc["hidden"]),
            head_hidden=int(self.model_doc["head_hidden"]),
            n_modalities=int(m),
            modality_dims=tuple(int(p) for p in p_m),
            task=str(task),
            deterministic=bool(self.model_doc["deterministic"]),
        )


def validate_config(doc: dict, seed_override: Optional[int] = None) -> RunConfig:
    """Schema-check a raw document and build the typed sections.

    The hash covers the document as written; a CLI seed override changes the
    effective seed but not the hash, so artifact chains stay compatible
    across seeds.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - (set(_SCHEMA) | {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    sections = {}
    for name in _SCHEMA:
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section '{name}' must be an object")
        sections[name] = _merge_section(name, given)

    data = sections["data"]
    if data["kind"] not in ("synthetic", "file"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'file', got '{data['kind']}'")
    if data["kind"] == "file" and not data["path"]:
        raise ConfigError("data.kind 'file' needs data.path")
    if data["kind"] == "synthetic":
        if len(data["p_m"]) != data["M"]:
            raise ConfigError("data.p_m length must equal data.M")

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    try:
        weights = LossWeights(**{k: v for k, v in sections["weights"].items()})
        policy = ViewPolicy(**{k: v for k, v in sections["policy"].items()})
        optim = OptimConfig(**{k: v for k, v in sections["optim"].items()})
    except Exception as exc:
        raise ConfigError(f"invalid config values: {exc}") from exc

    ev = sections["eval"]
    if ev["k"] < 1 or ev["bins"] < 1:
        raise ConfigError("eval.k and eval.bins must be at least 1")
    if not (0 <= ev["holdout_fraction"] < 1):
        raise ConfigError("eval.holdout_fraction out of range")

    full_doc = {name: sections[name] for name in _SCHEMA}
    full_doc["seed"] = seed
    return RunConfig(
        doc=full_doc,
        hash=config_hash(full_doc),
        seed=seed if seed_override is None else int(seed_override),
        data=data,
        model_doc=sections["model"],
        weights=weights,
        policy=policy,
        optim=optim,
        eval=ev,
    )


def load_config(path: Path | str, seed_override: Optional[int] = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file '{path}' does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file '{path}' is not valid JSON: {exc}") from exc
    return validate_config(doc, seed_override=seed_override)
