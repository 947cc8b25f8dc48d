"""Command line: gen-data, train, ablate, modality, gradcheck.

Exit codes: 0 ok, 1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import io as pltn
from .config import ExperimentConfig, for_preset, with_seed
from .data import SplitError, generate_cohort, load_cohort, make_split, save_cohort
from .evaluation import ALL_METRICS, NA, CvReport, cross_validate, fmt
from .gradcheck import rows_csv, run_gradcheck
from .models import ConfigError, ModelConfig, build_model, count_params

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

# ablation row order: (label, backbone, use_se, use_spp)
ABLATION_CELLS = [
    ("ResNet18", "resnet18", False, False),
    ("ResNet18 + SE", "resnet18", True, False),
    ("ResNet18 + SPP", "resnet18", False, True),
    ("ResNet18 + SE + SPP", "resnet18", True, True),
    ("DenseNet", "densenet", False, False),
    ("DenseNet + SE", "densenet", True, False),
    ("DenseNet + SPP", "densenet", False, True),
    ("DenseNet + SE + SPP", "densenet", True, True),
]
PLACEHOLDER_ROWS = ["Swin Transformer"]
MODALITY_MODELS = [("ResNet18 + SE + SPP", "resnet18"), ("DenseNet + SE + SPP", "densenet")]

TABLE2_HEADER = ["model", "run_id", "n_params", *ALL_METRICS, "status"]
TABLE3_HEADER = ["model", "modality", "run_id", "in_channels", *ALL_METRICS, "status"]


class UsageError(Exception):
    """Invalid configuration or missing input; maps to exit code 1."""


def _log(quiet: bool):
    def emit(msg: str) -> None:
        if not quiet:
            print(msg, flush=True)
    return emit


# ---------------------------------------------------------------------------
# configuration resolution


def resolve_config(args) -> ExperimentConfig:
    """Preset defaults, then the config file, then explicit flags."""
    preset = args.preset or "desk"
    cfg = for_preset(preset, args.seed if args.seed is not None else 0)
    if args.config:
        cfg = ExperimentConfig.load(args.config, cfg)
    if args.preset and cfg.model.scale_preset != args.preset:
        cfg = replace(cfg, model=ModelConfig.preset(args.preset, cfg.model.backbone,
                                                    in_channels=cfg.model.in_channels))
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if getattr(args, "folds", None) is not None:
        cfg = replace(cfg, k_folds=args.folds)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if getattr(args, "cohort", None):
        cfg = replace(cfg, cohort_dir=args.cohort)
    if getattr(args, "modality", None):
        cfg = replace(cfg, modality=args.modality)
    cfg.validate()
    if cfg.model.scale_preset == "paper" and not args.confirm_large:
        raise UsageError("the paper-scale preset trains full-size networks; pass --confirm-large to proceed")
    return cfg


def _load_cohort(cfg: ExperimentConfig):
    if not cfg.cohort_dir:
        raise UsageError("no cohort given; pass --cohort <dir> (written by gen-data) or set cohort_dir")
    root = Path(cfg.cohort_dir)
    if not (root / "cohort.json").is_file():
        raise UsageError(f"no cohort at {root}; run gen-data first")
    spec, records = load_cohort(root)
    make_split(records, cfg.k_folds, cfg.train.seed)  # fail early if the cohort cannot fill the folds
    return replace(cfg, cohort=spec), records


def _write_meta(out: Path, command: str, started: float, extra: Optional[dict] = None) -> None:
    # timestamps live here only, so every other output is byte-reproducible
    finished = time.time()
    meta = {
        "command": command,
        "started": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "finished": _dt.datetime.fromtimestamp(finished, _dt.timezone.utc).isoformat(),
        "elapsed_seconds": round(finished - started, 3),
        **(extra or {}),
    }
    pltn.atomic_write_text(out / "run_meta.json", json.dumps(meta, indent=2) + "\n")


def _run_cell(cfg: ExperimentConfig, records, model_cfg: ModelConfig, modality: str, out: Path, log) -> CvReport:
    run_dir = out / "runs" / model_cfg.run_id
    train_cfg = cfg.train_for(model_cfg.backbone)
    log(f"== {model_cfg.run_id}: {cfg.k_folds}-fold, {train_cfg.epochs} epochs, batch {train_cfg.batch_size}")
    report = cross_validate(records, model_cfg, train_cfg, cfg.k_folds, modality=modality,
                            split_seed=cfg.train.seed, out_dir=run_dir, log=log)
    pltn.atomic_write_text(run_dir / "cv_report.json", report.to_json())
    return report


def _csv(header, rows) -> str:
    return "\n".join(",".join(str(c) for c in r) for r in [header, *rows]) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, log) -> int:
    out = Path(cfg.output_dir)
    records = generate_cohort(cfg.cohort)
    save_cohort(records, cfg.cohort, out)
    pltn.atomic_write_text(out / "config.ini", cfg.to_ini())
    n_slices = sum(len(r.slices) for r in records)
    log(f"wrote {len(records)} patients ({n_slices} slices) to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, log) -> int:
    cfg, records = _load_cohort(cfg)
    out = Path(cfg.output_dir)
    started = time.time()
    pltn.atomic_write_text(out / "config.ini", cfg.to_ini())
    report = _run_cell(cfg, records, cfg.model, cfg.modality, out, log)
    _write_meta(out, "train", started)
    log(f"{cfg.model.run_id}: mean AUC {fmt(report.mean('auc'))}, accuracy {fmt(report.mean('accuracy'))}")
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, log) -> int:
    cfg, records = _load_cohort(cfg)
    out = Path(cfg.output_dir)
    started = time.time()
    pltn.atomic_write_text(out / "config.ini", cfg.to_ini())
    rows, failed = [], 0
    for label, backbone, se, spp in ABLATION_CELLS:
        mcfg = cfg.model_for(backbone, se, spp)
        n_params = count_params(build_model(mcfg))
        try:
            report = _run_cell(cfg, records, mcfg, cfg.modality, out, log)
        except Exception as exc:
            failed += 1
            log(f"{label}: failed: {exc}")
            rows.append([label, mcfg.run_id, n_params, *[NA] * len(ALL_METRICS), "failed"])
            continue
        rows.append([label, mcfg.run_id, n_params, *[fmt(report.mean(m)) for m in ALL_METRICS], "ok"])
    for label in PLACEHOLDER_ROWS:
        rows.append([label, "", "", *[NA] * len(ALL_METRICS), "not implemented"])
    pltn.atomic_write_text(out / "table2.csv", _csv(TABLE2_HEADER, rows))
    _write_meta(out, "ablate", started, {"failed_cells": failed})
    log(f"wrote {out / 'table2.csv'}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_modality(cfg: ExperimentConfig, log) -> int:
    cfg, records = _load_cohort(cfg)
    out = Path(cfg.output_dir)
    started = time.time()
    pltn.atomic_write_text(out / "config.ini", cfg.to_ini())
    rows, failed = [], 0
    for label, backbone in MODALITY_MODELS:
        aucs = {}
        for tag, modality in (("SM", "ct_only"), ("MM", "multimodal")):
            mcfg = cfg.model_for(backbone, True, True, modality)
            try:
                report = _run_cell(cfg, records, mcfg, modality, out, log)
            except Exception as exc:
                failed += 1
                log(f"{label} {tag}: failed: {exc}")
                rows.append([label, tag, mcfg.run_id, mcfg.in_channels, *[NA] * len(ALL_METRICS), "failed"])
                continue
            aucs[tag] = report.mean("auc")
            rows.append([label, tag, mcfg.run_id, mcfg.in_channels,
                         *[fmt(report.mean(m)) for m in ALL_METRICS], "ok"])
        if all(isinstance(aucs.get(t), float) for t in ("SM", "MM")):
            gap = aucs["MM"] - aucs["SM"]
            verdict = "as expected" if gap > 0 else "WARNING: multimodal did not beat CT-only"
            log(f"{label}: MM - SM AUC = {gap:+.4f} ({verdict})")
    pltn.atomic_write_text(out / "table3.csv", _csv(TABLE3_HEADER, rows))
    _write_meta(out, "modality", started, {"failed_cells": failed})
    log(f"wrote {out / 'table3.csv'}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(args, log) -> int:
    seed = args.seed if args.seed is not None else 0
    started = time.time()
    rows = run_gradcheck(seed=seed, include_models=not args.no_models, log=log)
    failures = [r for r in rows if not r.passed]
    if args.out:
        out = Path(args.out)
        pltn.atomic_write_text(out / "gradcheck.csv", rows_csv(rows))
        _write_meta(out, "gradcheck", started)
    if failures:
        print("gradient check FAILED: " + ", ".join(r.name for r in failures), file=sys.stderr)
        return EXIT_FAILED
    log(f"all {len(rows)} gradient checks passed in {time.time() - started:.1f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sespp", description="SE/SPP DenseNet and ResNet18 experiments on two-channel images.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, folds=True, cohort=True):
        p.add_argument("--config", help="INI experiment config; flags override it")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for cohort, split and training")
        p.add_argument("--preset", choices=["desk", "paper"], help="scale preset (default desk)")
        p.add_argument("--confirm-large", action="store_true", help="allow the paper-scale preset")
        p.add_argument("--quiet", action="store_true")
        if folds:
            p.add_argument("--folds", type=int, help="number of cross-validation folds")
        if cohort:
            p.add_argument("--cohort", help="cohort directory written by gen-data")

    common(sub.add_parser("gen-data", help="write a synthetic cohort"), folds=False, cohort=False)
    p = sub.add_parser("train", help="cross-validate one model configuration")
    common(p)
    p.add_argument("--modality", choices=["multimodal", "ct_only"])
    common(sub.add_parser("ablate", help="the 8-cell SE/SPP ablation (table2.csv)"))
    common(sub.add_parser("modality", help="CT-only vs PET+CT comparison (table3.csv)"))
    p = sub.add_parser("gradcheck", help="finite-difference audit of all layers and both desk models")
    p.add_argument("--out", help="also write gradcheck.csv here")
    p.add_argument("--no-models", action="store_true", help="skip the two full-model checks")
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate, "modality": cmd_modality}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log = _log(args.quiet)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args, log)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, log)
    except (UsageError, ConfigError, SplitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
