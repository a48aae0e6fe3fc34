"""Command-line surface: synth, pretrain, finetune, eval, sweep, ablate.

Every command is a pure function of (config file, input files, seed): reruns
produce byte-identical outputs. Outputs embed the config hash and downstream
commands reject inputs whose hash disagrees. Exit codes: 0 success, 2 config
or schema error, 3 data error, 4 numerical failure, 5 incompatible
checkpoint.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, load_config, validate_config
from .dataio import read_dataset, split_records, write_dataset
from .encoder import init_params
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NoEvidenceError,
    NonFiniteError,
    ShapeError,
)
from .inference import VARIANTS, evaluate_model
from .metrics import MetricsReport
from .seeding import derive_rng
from .synthdata import generate
from .trainer import (
    check_checkpoint_shapes,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    write_loss_csv,
)

METRIC_COLUMNS = [
    "mask_level",
    "variant",
    "auroc",
    "auprc",
    "nll",
    "ece",
    "mse",
    "mean_posterior_entropy",
    "cross_view_skl",
    "cross_view_mmd",
    "volume_nll_spearman",
]

ABLATIONS = ("consistency", "distribution", "contrastive")


def _threads_cap() -> int:
    """Parse LATENTSET_THREADS; execution is single-threaded either way."""
    raw = os.environ.get("LATENTSET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _check_no_clobber(paths: Sequence[Path], force: bool) -> None:
    for p in paths:
        if p.exists() and not force:
            raise DataError(f"refusing to overwrite existing file '{p}' (use --force)")


def _load_data(cfg: RunConfig, data_path: Path) -> tuple[list, dict]:
    records, manifest = read_dataset(data_path)
    if manifest.get("config_hash") != cfg.hash:
        raise DataError(
            f"dataset '{data_path}' was generated under config hash "
            f"{manifest.get('config_hash')}, current config is {cfg.hash}"
        )
    return records, manifest


def _load_ckpt(cfg: RunConfig, prefix: Path, manifest: dict):
    params, ck_manifest = load_checkpoint(prefix)
    model_cfg = cfg.model_config(manifest)
    reference = init_params(model_cfg, derive_rng(0, "shape-reference"))
    check_checkpoint_shapes(ck_manifest, reference, config_hash=cfg.hash)
    return params, ck_manifest, model_cfg


def _write_report(report: MetricsReport, json_path: Path, csv_path: Path) -> None:
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(report.to_json())
    header = ",".join(METRIC_COLUMNS)
    csv_path.write_text(header + "\n" + report.csv_row(METRIC_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------


def run_synth(cfg: RunConfig, out_path: Path, force: bool = False) -> tuple[Path, Path]:
    spec = cfg.generator_spec()
    records = generate(spec)
    manifest = {
        "config_hash": cfg.hash,
        "d": spec.d,
        "M": spec.n_modalities,
        "p_m": list(spec.modality_dims),
        "task": spec.task,
        "n_records": spec.n,
        "data_seed": spec.seed,
    }
    return write_dataset(records, out_path, manifest, force=force)


def run_pretrain(cfg: RunConfig, data_path: Path, out_dir: Path, force: bool = False) -> dict:
    records, manifest = _load_data(cfg, data_path)
    train_val, _holdout = split_records(records, cfg.eval["holdout_fraction"])
    model_cfg = cfg.model_config(manifest)
    out_dir = Path(out_dir)
    targets = [
        out_dir / "final.manifest.json", out_dir / "final.params.bin",
        out_dir / "best.manifest.json", out_dir / "best.params.bin",
        out_dir / "loss.csv",
    ]
    _check_no_clobber(targets, force)
    params = init_params(model_cfg, derive_rng(cfg.seed, "init"))
    result = pretrain(
        params, train_val, model_cfg, cfg.weights, cfg.policy, cfg.optim, cfg.seed
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    step = len(result.log_rows)
    save_checkpoint(out_dir / "final", result.final_params, cfg.hash, step,
                    extra={"seed": cfg.seed, "phase": "pretrain-final"})
    save_checkpoint(out_dir / "best", result.best_params, cfg.hash, step,
                    extra={"seed": cfg.seed, "phase": "pretrain-best",
                           "best_epoch": result.best_epoch})
    write_loss_csv(out_dir / "loss.csv", result.log_rows)
    return {"out_dir": out_dir, "best_epoch": result.best_epoch,
            "val_history": result.val_history}


def run_finetune(
    cfg: RunConfig,
    checkpoint: Path,
    data_path: Path,
    out_dir: Path,
    mode: str = "frozen",
    force: bool = False,
    label_fraction: Optional[float] = None,
) -> dict:
    records, manifest = _load_data(cfg, data_path)
    train_val, _holdout = split_records(records, cfg.eval["holdout_fraction"])
    params, _, model_cfg = _load_ckpt(cfg, checkpoint, manifest)
    out_dir = Path(out_dir)
    _check_no_clobber([out_dir / "finetuned.manifest.json",
                       out_dir / "finetuned.params.bin"], force)
    optim = cfg.optim
    if label_fraction is not None:
        optim = dataclasses.replace(optim, label_fraction=label_fraction)
    result = finetune(
        params, train_val, model_cfg, cfg.weights, cfg.policy, optim, cfg.seed, mode=mode
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "finetuned", result.params, cfg.hash, len(result.log_rows),
                    extra={"seed": cfg.seed, "phase": f"finetune-{mode}",
                           "temperature": result.temperature})
    return {"out_dir": out_dir, "temperature": result.temperature}


def run_eval(
    cfg: RunConfig,
    checkpoint: Path,
    data_path: Path,
    out_dir: Path,
    mask_level: float = 0.0,
    variant: str = "distributional",
    force: bool = False,
) -> MetricsReport:
    records, manifest = _load_data(cfg, data_path)
    _train_val, holdout = split_records(records, cfg.eval["holdout_fraction"])
    if not holdout:
        raise DataError("holdout split is empty; increase eval.holdout_fraction")
    params, _, model_cfg = _load_ckpt(cfg, checkpoint, manifest)
    report = evaluate_model(
        params, holdout, model_cfg, cfg.policy,
        mask_level=mask_level, variant=variant,
        k=cfg.eval["k"], bins=cfg.eval["bins"], seed=cfg.seed, config_hash=cfg.hash,
    )
    out_dir = Path(out_dir)
    stem = f"metrics_L{int(round(mask_level * 100))}_{variant}"
    json_path = out_dir / f"{stem}.json"
    csv_path = out_dir / f"{stem}.csv"
    _check_no_clobber([json_path, csv_path], force)
    _write_report(report, json_path, csv_path)
    return report


def run_sweep(
    cfg: RunConfig,
    checkpoint: Path,
    data_path: Path,
    out_dir: Path,
    force: bool = False,
) -> dict:
    """Missingness sweep: one report per (mask level, variant), plus the
    level-by-variant headline table. Monotonicity is reported, not enforced."""
    records, manifest = _load_data(cfg, data_path)
    _train_val, holdout = split_records(records, cfg.eval["holdout_fraction"])
    params, _, model_cfg = _load_ckpt(cfg, checkpoint, manifest)
    levels = [float(x) for x in cfg.eval["mask_levels"]]
    out_dir = Path(out_dir)
    _check_no_clobber([out_dir / "sweep.csv", out_dir / "sweep_full.csv",
                       out_dir / "sweep_summary.json"], force)

    headline = "auroc" if model_cfg.is_classification else "mse"
    table: dict[str, dict[float, MetricsReport]] = {}
    for variant in VARIANTS:
        table[variant] = {}
        for level in levels:
            table[variant][level] = evaluate_model(
                params, holdout, model_cfg, cfg.policy,
                mask_level=level, variant=variant,
                k=cfg.eval["k"], bins=cfg.eval["bins"], seed=cfg.seed,
                config_hash=cfg.hash,
            )
    out_dir.mkdir(parents=True, exist_ok=True)

    head = "variant," + ",".join(f"level_{level}" for level in levels)
    lines = [head]
    for variant in VARIANTS:
        cells = [repr(table[variant][level].metrics[headline]) for level in levels]
        lines.append(variant + "," + ",".join(cells))
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")

    flat = [",".join(METRIC_COLUMNS)]
    for variant in VARIANTS:
        for level in levels:
            flat.append(table[variant][level].csv_row(METRIC_COLUMNS))
    (out_dir / "sweep_full.csv").write_text("\n".join(flat) + "\n")

    summary: dict[str, object] = {"levels": levels, "headline": headline}
    for variant in VARIANTS:
        vals = [table[variant][level].metrics[headline] for level in levels]
        decreasing = all(vals[i] > vals[i + 1] for i in range(len(vals) - 1))
        summary[variant] = {
            headline: vals,
            "monotone_decreasing": decreasing,
        }
    (out_dir / "sweep_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    return summary


def _ablated_doc(doc: dict, which: str) -> dict:
    doc = copy.deepcopy(doc)
    if which == "consistency":
        doc["weights"]["lambda_cons"] = 0.0
    elif which == "contrastive":
        doc["weights"]["lambda_nce"] = 0.0
    elif which == "distribution":
        doc["model"]["deterministic"] = True
    else:
        raise ConfigError(f"unknown ablation '{which}'")
    return doc


def run_ablate(
    cfg: RunConfig,
    data_path: Path,
    out_dir: Path,
    which: str,
    force: bool = False,
) -> dict:
    """Train the full model and one ablated variant under identical seeds and
    emit side-by-side metrics."""
    if which not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS}, got '{which}'")
    records, manifest = _load_data(cfg, data_path)
    train_val, holdout = split_records(records, cfg.eval["holdout_fraction"])
    out_dir = Path(out_dir)
    json_path = out_dir / f"ablation_{which}.json"
    csv_path = out_dir / f"ablation_{which}.csv"
    _check_no_clobber([json_path, csv_path], force)

    variant_names = {
        "consistency": "no_consistency",
        "contrastive": "no_contrastive",
        "distribution": "deterministic",
    }
    runs = {
        "full": cfg,
        variant_names[which]: validate_config(_ablated_doc(cfg.doc, which),
                                              seed_override=cfg.seed),
    }
    reports: dict[str, MetricsReport] = {}
    for name, run_cfg in runs.items():
        model_cfg = run_cfg.model_config(manifest)
        params = init_params(model_cfg, derive_rng(run_cfg.seed, "init"))
        pre = pretrain(params, train_val, model_cfg, run_cfg.weights, run_cfg.policy,
                       run_cfg.optim, run_cfg.seed)
        ft = finetune(pre.best_params, train_val, model_cfg, run_cfg.weights,
                      run_cfg.policy, run_cfg.optim, run_cfg.seed, mode="frozen")
        eval_variant = "deterministic" if model_cfg.deterministic else "distributional"
        report = evaluate_model(
            ft.params, holdout, model_cfg, run_cfg.policy,
            mask_level=0.0, variant=eval_variant,
            k=cfg.eval["k"], bins=cfg.eval["bins"], seed=cfg.seed, config_hash=cfg.hash,
        )
        report.meta["ablation_variant"] = name
        report.meta["seed"] = cfg.seed
        reports[name] = report

    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {name: {"metrics": r.metrics, "meta": r.meta} for name, r in reports.items()}
    json_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    columns = ["ablation_variant"] + METRIC_COLUMNS
    lines = [",".join(columns)]
    for name, r in reports.items():
        lines.append(r.csv_row(columns))
    csv_path.write_text("\n".join(lines) + "\n")
    return {name: r.metrics for name, r in reports.items()}


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentset",
        description="Uncertainty-aware multiview representation learning runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, checkpoint=False):
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed (hash is unaffected)")
        p.add_argument("--out", required=True, help="output file or directory")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        if data:
            p.add_argument("--data", required=True, help="dataset JSONL path")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint prefix (without .manifest.json)")

    common(sub.add_parser("synth", help="generate a synthetic dataset"), data=False)
    common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    p_ft = sub.add_parser("finetune", help="adapt to the labeled task")
    common(p_ft, checkpoint=True)
    p_ft.add_argument("--mode", choices=["frozen", "head_calibration", "full"],
                      default="frozen")
    p_ft.add_argument("--label-fraction", type=float, default=None,
                      help="labeled fraction override (no schedule)")
    p_ev = sub.add_parser("eval", help="metric suite at one mask level")
    common(p_ev, checkpoint=True)
    p_ev.add_argument("--mask-level", type=float, default=0.0)
    p_ev.add_argument("--variant", choices=list(VARIANTS), default="distributional")
    common(sub.add_parser("sweep", help="metrics across all mask levels"),
           checkpoint=True)
    p_ab = sub.add_parser("ablate", help="paired full-vs-ablated training runs")
    common(p_ab)
    p_ab.add_argument("--which", choices=list(ABLATIONS), required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _threads_cap()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        if args.command == "synth":
            run_synth(cfg, Path(args.out), force=args.force)
        elif args.command == "pretrain":
            run_pretrain(cfg, Path(args.data), Path(args.out), force=args.force)
        elif args.command == "finetune":
            run_finetune(cfg, Path(args.checkpoint), Path(args.data), Path(args.out),
                         mode=args.mode, force=args.force,
                         label_fraction=args.label_fraction)
        elif args.command == "eval":
            run_eval(cfg, Path(args.checkpoint), Path(args.data), Path(args.out),
                     mask_level=args.mask_level, variant=args.variant,
                     force=args.force)
        elif args.command == "sweep":
            run_sweep(cfg, Path(args.checkpoint), Path(args.data), Path(args.out),
                      force=args.force)
        elif args.command == "ablate":
            run_ablate(cfg, Path(args.data), Path(args.out), which=args.which,
                       force=args.force)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command}")
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, NoEvidenceError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
