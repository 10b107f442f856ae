"""Command-line interface: conform, segment, train, evaluate, report.

Exit codes are a stable contract: 0 success, 2 I/O failure, 3 degenerate
input data, 4 checkpoint mismatch, 5 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatch, ConstantIntensity, EmptyVolume, SubsegError
from .labels import LabelTable
from .metrics import (
    CaseReport,
    aggregate_reports,
    evaluate_segmentation,
    read_report,
    render_table,
    rows_to_csv,
    write_report,
)
from .model import HybridSegNet3d, ModelConfig, load_checkpoint, make_predictor, parameter_count
from .nifti import NiftiFormatError
from .patches import segment_volume
from .phantom import make_phantoms
from .training import TrainConfig, prepare_case, train
from .volume import Volume, conform, load_volume, save_volume

log = logging.getLogger("subseg")

EXIT_OK = 0
EXIT_IO = 2
EXIT_DEGENERATE = 3
EXIT_CHECKPOINT = 4
EXIT_CONFIG = 5

DEVICE_ENV_VAR = "SUBSEG_DEVICE"


def _resolve_device(choice: str) -> str:
    if choice == "accelerator":
        if torch.cuda.is_available():
            return "cuda"
        log.warning("no accelerator available, falling back to cpu")
        return "cpu"
    return "cpu"


def _load_table(path: str | None) -> LabelTable:
    return LabelTable.from_file(path) if path else LabelTable.default()


def cmd_conform(args) -> int:
    vol = load_volume(args.input, role="intensity")
    conformed, report = conform(vol)
    save_volume(args.output, conformed, descrip="conformed RAS 1mm 256^3")
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("conformed %s -> %s (identity=%s)", args.input, args.output, report["identity"])
    return EXIT_OK


def cmd_segment(args) -> int:
    table = _load_table(args.label_table)
    device = _resolve_device(args.device)
    model, _ = load_checkpoint(args.checkpoint, table=table, force=args.force, device=device)

    vol = load_volume(args.input, role="intensity")
    if vol.is_conformed_grid() and vol.data.min() >= 0 and vol.data.max() <= 1:
        log.info("input already conformed")
        conformed = vol
    else:
        log.info("conforming input (shape %s, spacing %s)", vol.data.shape, vol.spacing)
        conformed, _ = conform(vol)

    t0 = time.perf_counter()
    seg, stats = segment_volume(conformed, make_predictor(model, device), table, stride=args.stride)
    wall = time.perf_counter() - t0
    save_volume(args.output, seg)
    log.info("segmented %s: %d patches, wall time %.2f s", args.input, stats["num_patches"], wall)
    print(f"patches={stats['num_patches']} wall_time_s={wall:.3f}")
    if args.report:
        stats["total_wall_time_s"] = wall
        Path(args.report).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _build_training_cases(data_cfg: dict, table: LabelTable, stride: int):
    if "phantoms" in data_cfg:
        spec = data_cfg["phantoms"]
        count = int(spec.get("count", 1))
        val_count = int(spec.get("val_count", 0))
        seed = int(spec.get("seed", 0))
        cases = make_phantoms(count + val_count, seed=seed, table=table)
        prepared = [
            prepare_case(p.intensity, p.labels, table, stride=stride, case_id=f"phantom-{p.seed}")
            for p in cases
        ]
        return prepared[:count], prepared[count:]

    def load_pairs(pairs):
        out = []
        for pair in pairs:
            image = load_volume(pair["image"], role="intensity")
            labels = load_volume(pair["labels"], role="label")
            out.append(prepare_case(image, labels, table, stride=stride,
                                    case_id=Path(pair["image"]).name))
        return out

    return load_pairs(data_cfg.get("train", [])), load_pairs(data_cfg.get("val", []))


def cmd_train(args) -> int:
    try:
        cfg_raw = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from exc

    train_cfg = TrainConfig(**cfg_raw.get("train", {}))
    train_cfg.validate()
    model_cfg = ModelConfig(**cfg_raw.get("model", {}))
    table = _load_table(cfg_raw.get("label_table"))

    torch.manual_seed(train_cfg.seed)
    model = HybridSegNet3d(model_cfg)
    log.info("model parameters: %d", parameter_count(model_cfg))

    train_cases, val_cases = _build_training_cases(cfg_raw.get("data", {}), table, train_cfg.stride)
    result = train(model, train_cases, val_cases, train_cfg, args.out_dir,
                   table=table, resume_from=args.resume)
    log.info("trained %d steps; last checkpoint %s", result.steps, result.last_checkpoint)
    if result.best_checkpoint:
        log.info("best validation DSC %.4f at %s", result.best_val_dsc, result.best_checkpoint)
    return EXIT_OK


def _nifti_files(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.name.endswith(".nii") or p.name.endswith(".nii.gz"):
            files[p.name] = p
    return files


def cmd_evaluate(args) -> int:
    table = _load_table(args.label_table)
    pred_dir, ref_dir = Path(args.pred_dir), Path(args.ref_dir)
    if not pred_dir.is_dir() or not ref_dir.is_dir():
        raise FileNotFoundError("pred/ref directories must exist")
    preds = _nifti_files(pred_dir)
    refs = _nifti_files(ref_dir)
    shared = sorted(set(preds) & set(refs))
    if not shared:
        raise FileNotFoundError("no matching NIfTI filenames between pred and ref directories")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in shared:
        pred = load_volume(preds[name], role="label")
        ref = load_volume(refs[name], role="label")
        report = evaluate_segmentation(pred.data, ref.data, table, spacing=ref.spacing,
                                       case_id=name, group=args.group)
        stem = name.replace(".nii.gz", "").replace(".nii", "")
        write_report(out_dir / f"{stem}.json", report)
        log.info("%s: mean DSC %s over %d regions", name,
                 f"{report.mean_dsc:.3f}" if report.mean_dsc is not None else "n/a", report.n_dsc)
    return EXIT_OK


def cmd_report(args) -> int:
    reports_dir = Path(args.reports_dir)
    paths = sorted(reports_dir.glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no report JSONs in {reports_dir}")
    reports = [read_report(p) for p in paths]
    rows = aggregate_reports(reports)
    text = render_table(rows)
    Path(args.out).write_text(text)
    if args.csv:
        Path(args.csv).write_text(rows_to_csv(rows))
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subseg",
                                     description="3D patch-based subcortical segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("conform", help="canonicalize a scan to RAS 1mm 256^3 in [0,1]")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--report", help="write the resample report JSON here")
    p.set_defaults(func=cmd_conform)

    p = sub.add_parser("segment", help="segment a scan with a trained checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label-table", help="override the shipped label table (TSV)")
    p.add_argument("--stride", type=int, default=16, help="patch step in voxels (default 16)")
    p.add_argument("--device", choices=["cpu", "accelerator"],
                   default=os.environ.get(DEVICE_ENV_VAR, "cpu"))
    p.add_argument("--force", action="store_true", help="load despite checkpoint mismatch")
    p.add_argument("--report", help="write inference stats JSON here")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train from a JSON configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--label-table")
    p.add_argument("--group", default="all", help="dataset tag stored in each report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate case reports into a summary table")
    p.add_argument("--reports-dir", required=True)
    p.add_argument("--out", required=True, help="plain-text table output")
    p.add_argument("--csv", help="also write a CSV summary here")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (FileNotFoundError, OSError, NiftiFormatError) as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (EmptyVolume, ConstantIntensity) as exc:
        log.error("degenerate input: %s", exc)
        return EXIT_DEGENERATE
    except CheckpointMismatch as exc:
        log.error("checkpoint rejected: %s", exc)
        return EXIT_CHECKPOINT
    except (ValueError, TypeError, KeyError, SubsegError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
