"""``biview`` command line: generate data, pretrain, fine-tune, evaluate, analyze.

Subcommands::

    biview gen-data  --out DIR --patients N [--missing-rate F] [--size PX]
                     [--seed S] [--force]
    biview pretrain  --data DIR [--config FILE] [--init CKPT] --out CKPT
                     [--log FILE]
    biview finetune  --task nc|ns|mnc --data DIR [--config FILE]
                     [--proportion 10|20|50|100] [--init CKPT] --out DIR
                     [--seeds N]
    biview eval      --task nc|ns|mnc --data DIR --ckpt PATH [--ckpt ...]
                     [--config FILE] [--compare REPORT.json] [--out FILE]
    biview analyze actmap --ckpt CKPT --data DIR [--config FILE]
                     [--thresholds 0.3,0.4,...] [--stage I] [--out FILE]
    biview analyze cka --ckpt-a A --ckpt-b B --data DIR [--config FILE]
                     [--out-csv FILE] [--out-png FILE] [--cap N]

Every command prints one JSON document to stdout and exits 0 on success,
2 on configuration errors, 3 on data/checkpoint errors, and 4 on numerical
failures.  Re-running a command with identical inputs reproduces identical
output (no timestamps).  Commands that write checkpoints also write the
merged effective config next to them as ``<artifact>.config.json``.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (ActivationMapConfig, activation_map, actmap_dice,
                       cka_map, load_any_backbone)
from .augment import normalize
from .config import RunConfig, config_hash, load_run_config, write_effective_config
from .data import dataset_hash, generate_synthetic, load_manifest, make_splits
from .errors import BiviewError, ConfigError, DataError, NumericalError
from .finetune import (FinetuneConfig, collect_samples, evaluate_samples,
                       load_task_model, run_finetune)
from .metrics import MetricsReport
from .pretrain import run_pretraining

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _emit(payload: dict, out_file: str | None = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_file:
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        Path(out_file).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _load_records(data_dir: str):
    records = load_manifest(data_dir)
    return records, dataset_hash(data_dir)


def _run_config(args, section_overrides: dict | None = None) -> RunConfig:
    return load_run_config(getattr(args, "config", None), section_overrides)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(
            f"output directory {out} is not empty; pass --force to overwrite")
    generate_synthetic(out, num_patients=args.patients,
                       missing_rate=args.missing_rate,
                       image_size=args.size, seed=args.seed)
    records = load_manifest(out)
    paired = sum(1 for r in records if r.paired)
    _emit({
        "out": str(out),
        "patients": len(records),
        "paired": paired,
        "unpaired": len(records) - paired,
        "malignant_fraction": round(sum(r.label for r in records) / len(records), 4),
        "image_size": args.size,
        "seed": args.seed,
        "dataset_hash": dataset_hash(out),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _run_config(args, {"pretrain": {"init_checkpoint": args.init}})
    records, ds_hash = _load_records(args.data)
    splits = make_splits(records, cfg.split, cfg.seed)
    ckpt = run_pretraining(args.data, list(splits.pretrain), cfg.pretrain,
                           cfg.encoder, cfg.augment, out_ckpt=args.out,
                           log_file=args.log)
    config_path = write_effective_config(cfg, ckpt)
    _emit({
        "checkpoint": str(ckpt),
        "config": str(config_path),
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
        "pretrain_patients": len(splits.pretrain),
        "epochs": cfg.pretrain.effective().epochs,
        "two_stage": cfg.pretrain.two_stage,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def cmd_finetune(args) -> int:
    overrides = {"finetune": {"task": args.task, "proportion": args.proportion,
                              "init_checkpoint": args.init}}
    cfg = _run_config(args, overrides)
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    records, ds_hash = _load_records(args.data)
    splits = make_splits(records, cfg.split, cfg.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    values, trials = [], []
    for trial in range(args.seeds):
        trial_cfg = replace(cfg.finetune, seed=cfg.finetune.seed + trial)
        trial_dir = out_dir / f"trial{trial}"
        trial_dir.mkdir(exist_ok=True)
        ckpt = trial_dir / f"{trial_cfg.task}_r{trial_cfg.proportion}.ckpt"
        result = run_finetune(args.data, splits, trial_cfg, cfg.encoder,
                              cfg.augment, out_ckpt=ckpt,
                              history_file=trial_dir / "history.jsonl")
        write_effective_config(replace(cfg, finetune=trial_cfg), ckpt)
        values.append(result.best_metric)
        trials.append({
            "trial": trial, "seed": trial_cfg.seed, "checkpoint": str(ckpt),
            "best_val_metric": result.best_metric, "best_lr0": result.best_lr0,
            "best_epochs": result.best_epochs, "best_epoch": result.best_epoch,
        })
    report = MetricsReport(task=cfg.finetune.task,
                           metric=f"val_{cfg.finetune.metric_name}",
                           values=tuple(values))
    _emit({
        **report.to_dict(),
        "trials": trials,
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
        "proportion": cfg.finetune.proportion,
        "init_checkpoint": cfg.finetune.init_checkpoint,
    }, out_dir / "report.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _expand_checkpoints(paths: list[str]) -> list[Path]:
    found: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            inside = sorted(path.rglob("*.ckpt"))
            if not inside:
                raise DataError(f"no .ckpt files under directory {path}")
            found.extend(inside)
        elif path.exists():
            found.append(path)
        else:
            raise DataError(f"checkpoint not found: {path}")
    return found


def cmd_eval(args) -> int:
    cfg = _run_config(args, {"finetune": {"task": args.task}})
    records, ds_hash = _load_records(args.data)
    splits = make_splits(records, cfg.split, cfg.seed)
    ckpts = _expand_checkpoints(args.ckpt)
    test_samples = collect_samples(args.data, list(splits.test), args.task)

    values = []
    for ckpt in ckpts:
        model = load_task_model(ckpt, args.task, cfg.encoder)
        values.append(evaluate_samples(model, args.task, test_samples,
                                       cfg.finetune.batch_size))
    metric_name = FinetuneConfig(task=args.task).metric_name
    report = MetricsReport(task=args.task, metric=metric_name,
                           values=tuple(values))
    if args.compare:
        baseline = MetricsReport.from_dict(
            json.loads(Path(args.compare).read_text(encoding="utf-8")))
        report = report.with_comparison(baseline)
    _emit({
        **report.to_dict(),
        "checkpoints": [str(c) for c in ckpts],
        "test_patients": len(splits.test),
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
    }, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze_actmap(args) -> int:
    overrides = {}
    if args.thresholds:
        try:
            parsed = tuple(float(v) for v in args.thresholds.split(","))
        except ValueError:
            raise ConfigError(
                f"--thresholds must be comma-separated floats, got "
                f"{args.thresholds!r}") from None
        overrides["thresholds"] = parsed
    if args.stage is not None:
        overrides["stage"] = args.stage
    cfg = _run_config(args, {"actmap": overrides})
    records, ds_hash = _load_records(args.data)
    splits = make_splits(records, cfg.split, cfg.seed)
    backbone = load_any_backbone(args.ckpt, cfg.encoder)
    samples = collect_samples(args.data, list(splits.test), "ns")

    sums = {t: 0.0 for t in cfg.actmap.thresholds}
    degenerate = 0
    for sample in samples:
        amap = activation_map(backbone, sample.image, cfg.actmap.stage)
        degenerate += int(amap.degenerate)
        for t, v in actmap_dice(amap, sample.mask, cfg.actmap).items():
            sums[t] += v
    _emit({
        "checkpoint": args.ckpt,
        "stage": cfg.actmap.stage,
        "num_images": len(samples),
        "degenerate_maps": degenerate,
        "mean_dice": {f"{t:g}": sums[t] / len(samples)
                      for t in cfg.actmap.thresholds},
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
    }, args.out)
    return EXIT_OK


def cmd_analyze_cka(args) -> int:
    cfg = _run_config(args)
    records, ds_hash = _load_records(args.data)
    splits = make_splits(records, cfg.split, cfg.seed)
    backbone_a = load_any_backbone(args.ckpt_a, cfg.encoder)
    backbone_b = load_any_backbone(args.ckpt_b, cfg.encoder)
    samples = collect_samples(args.data, list(splits.test), "nc")
    probe = np.stack([normalize(s.image) for s in samples])
    grid = cka_map(backbone_a, backbone_b, probe, cap=args.cap)

    csv_path = grid.save_csv(args.out_csv)
    png_path = grid.save_heatmap(args.out_png) if args.out_png else None
    _emit({
        "checkpoint_a": args.ckpt_a,
        "checkpoint_b": args.ckpt_b,
        "layers": list(grid.layer_names),
        "diagonal": [round(float(v), 6) for v in grid.diagonal],
        "probe_images": int(min(len(samples), args.cap)),
        "csv": str(csv_path),
        "png": str(png_path) if png_path else None,
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="biview",
        description="Two-view contrastive pretraining and downstream tasks "
                    "on paired-view nodule images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic two-view dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--patients", required=True, type=int)
    p.add_argument("--missing-rate", type=float, default=0.0,
                   help="fraction of patients with one view missing")
    p.add_argument("--size", type=int, default=32, help="image side length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="contrastive self-supervised pretraining")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--init", help="checkpoint to continue from (second stage)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning on a task")
    p.add_argument("--task", required=True, choices=("nc", "ns", "mnc"))
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--proportion", type=int, choices=(10, 20, 50, 100))
    p.add_argument("--init", help="pretraining checkpoint (omit: random init)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of independent trials")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="test-split metric for task checkpoints")
    p.add_argument("--task", required=True, choices=("nc", "ns", "mnc"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, action="append",
                   help="task checkpoint file or directory (repeatable)")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--compare", help="baseline report JSON for a paired t-test")
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="post-hoc model analyses")
    asub = p.add_subparsers(dest="analysis", required=True)

    a = asub.add_parser("actmap", help="activation-map Dice sweep on the test split")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--config", help="TOML run configuration")
    a.add_argument("--thresholds", help="comma-separated, e.g. 0.3,0.5,0.7")
    a.add_argument("--stage", type=int, help="backbone stage to probe")
    a.add_argument("--out", help="write the JSON table here as well")
    a.set_defaults(func=cmd_analyze_actmap)

    a = asub.add_parser("cka", help="layer-wise CKA grid between two checkpoints")
    a.add_argument("--ckpt-a", required=True)
    a.add_argument("--ckpt-b", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--config", help="TOML run configuration")
    a.add_argument("--out-csv", default="cka_grid.csv")
    a.add_argument("--out-png", help="also render a heatmap PNG")
    a.add_argument("--cap", type=int, default=256,
                   help="probe-set size cap")
    a.set_defaults(func=cmd_analyze_cka)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BiviewError as exc:
        # data, checkpoint and shape problems all point at the inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
