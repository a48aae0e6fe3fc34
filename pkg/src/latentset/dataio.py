"""Dataset files: JSON Lines records with a sibling JSON manifest.

One record per line: {"id", "modalities": {"m0": [...], ...}, "mask",
"label", "z_true"}. The manifest pins dimensions and hashes so downstream
commands can reject mismatched inputs. Reads validate every record against
the manifest.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoder import PatientRecord
from .errors import DataError

MANIFEST_SUFFIX = ".manifest.json"


def manifest_path(data_path: Path | str) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + MANIFEST_SUFFIX)


def _record_to_json(rec: PatientRecord) -> str:
    doc = {
        "id": rec.id,
        "modalities": {f"m{m}": rec.modalities[m].tolist() for m in range(rec.n_modalities)},
        "mask": rec.mask.tolist(),
        "label": rec.label,
        "z_true": None if rec.z_true is None else rec.z_true.tolist(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def write_dataset(
    records: Sequence[PatientRecord],
    data_path: Path | str,
    manifest: dict,
    force: bool = False,
) -> tuple[Path, Path]:
    """Write the JSONL file and its manifest; refuses to overwrite without force."""
    data_path = Path(data_path)
    man_path = manifest_path(data_path)
    for p in (data_path, man_path):
        if p.exists() and not force:
            raise DataError(f"refusing to overwrite existing file '{p}' (use --force)")
    data_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [_record_to_json(r) for r in records]
    data_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    man_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return data_path, man_path


def read_dataset(data_path: Path | str) -> tuple[list[PatientRecord], dict]:
    """Load records and manifest, validating dimensions against the manifest."""
    data_path = Path(data_path)
    man_path = manifest_path(data_path)
    if not data_path.exists():
        raise DataError(f"dataset file '{data_path}' does not exist")
    if not man_path.exists():
        raise DataError(f"dataset manifest '{man_path}' does not exist")
    manifest = json.loads(man_path.read_text())
    dims = manifest.get("p_m")
    n_mod = manifest.get("M")
    records: list[PatientRecord] = []
    with open(data_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{data_path}:{line_no}: invalid JSON ({exc})") from exc
            mods = []
            for m in range(n_mod):
                key = f"m{m}"
                if key not in doc["modalities"]:
                    raise DataError(f"{data_path}:{line_no}: missing modality '{key}'")
                vec = np.asarray(doc["modalities"][key], dtype=np.float64)
                if vec.shape != (dims[m],):
                    raise DataError(
                        f"{data_path}:{line_no}: modality {m} has {vec.shape[0]} features, "
                        f"manifest says {dims[m]}"
                    )
                mods.append(vec)
            records.append(
                PatientRecord(
                    id=str(doc["id"]),
                    modalities=tuple(mods),
                    mask=np.asarray(doc["mask"], dtype=np.int8),
                    label=None if doc.get("label") is None else float(doc["label"]),
                    z_true=None if doc.get("z_true") is None else np.asarray(doc["z_true"]),
                )
            )
    expected = manifest.get("n_records")
    if expected is not None and expected != len(records):
        raise DataError(
            f"dataset has {len(records)} records, manifest says {expected}"
        )
    return records, manifest


def split_records(
    records: Sequence[PatientRecord],
    holdout_fraction: float,
) -> tuple[list[PatientRecord], list[PatientRecord]]:
    """Deterministic index split: the last fraction is the evaluation holdout."""
    records = list(records)
    n_hold = int(len(records) * holdout_fraction)
    cut = len(records) - n_hold
    return records[:cut], records[cut:]
