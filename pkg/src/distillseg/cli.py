"""Command-line front end.

Every command exits 0 on success and nonzero with a single `error: ...`
line on stderr otherwise, so wrappers can parse failures mechanically.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import (
    DataError,
    DatasetSpec,
    NiftiError,
    build_dataset,
    export_volume_pair,
    select_subjects,
)
from .experiments import (
    BASELINE_LABEL,
    ConfigError,
    ExperimentConfig,
    ResultTable,
    _evaluate_into,
    _run_unit,
    collect_seed_metrics,
    emit_training_curves,
    ensure_teacher,
    load_datasets,
    parse_config,
    render_report,
    run_ablation,
)
from .losses import LossInputError
from .metrics import MetricInputError, evaluate_model, one_way_anova
from .models import CheckpointError, ModelError
from .train import TrainingError, TrainingRecord, distill, train_student_baseline

_ERRORS = (
    ConfigError,
    DataError,
    NiftiError,
    TrainingError,
    ModelError,
    CheckpointError,
    MetricInputError,
    LossInputError,
    OSError,
    ValueError,
)


def _find_volume_pairs(in_dir: Path) -> list[tuple[str, Path, Path | None]]:
    """Locate (subject, image volume, mask volume or None) triples.

    Two layouts are recognized: images/ + masks/ subdirectories with equal
    filenames, or imagesTr/ + labelsTr/. Mask-less images are kept.
    """
    for img_name, mask_name in (("images", "masks"), ("imagesTr", "labelsTr")):
        img_dir = in_dir / img_name
        if img_dir.is_dir():
            mask_dir = in_dir / mask_name
            pairs = []
            for p in sorted(img_dir.iterdir()):
                if not p.name.endswith((".nii", ".nii.gz")) or p.name.startswith("."):
                    continue
                subject = p.name.removesuffix(".gz").removesuffix(".nii")
                mask = mask_dir / p.name
                pairs.append((subject, p, mask if mask.exists() else None))
            if not pairs:
                raise DataError(f"no .nii/.nii.gz volumes under {img_dir}")
            return pairs
    raise DataError(
        f"{in_dir} has neither images/+masks/ nor imagesTr/+labelsTr/ subdirectories"
    )


def cmd_prep(args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    pairs = _find_volume_pairs(in_dir)
    subjects = [s for s, _, _ in pairs]
    keep = set(select_subjects(subjects, args.fraction, args.seed))
    written = 0
    for subject, img, mask in pairs:
        if subject not in keep:
            continue
        written += len(export_volume_pair(img, mask, out_dir, subject_id=subject))
    print(f"wrote {written} slices from {len(keep)} subjects to {out_dir}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = parse_config(args.config)
    train_set, val_set = load_datasets(cfg)
    path = ensure_teacher(cfg, train_set, val_set)
    print(f"teacher checkpoint: {path}")
    return 0


def _train_one_student(cfg: ExperimentConfig, label: str, data_fraction: float) -> dict:
    train_set, val_set = load_datasets(cfg)
    seed = cfg.seeds[0]
    b = cfg.baseline

    def worker(work: Path) -> dict:
        ckpt, record = train_student_baseline(
            train_set,
            cfg.student_config(),
            val_set=val_set,
            epochs=b["epochs"],
            lr=b["lr"],
            batch_size=b["batch_size"],
            optimizer=b["optimizer"],
            seed=seed,
            data_fraction=data_fraction,
            ckpt_path=work / "student.ckpt",
        )
        emit_training_curves(record, work, stem="record", plot=cfg.plot_curves)
        return _evaluate_into(ckpt, val_set, work)

    return _run_unit(cfg.output_dir / label / str(seed), worker)


def cmd_train_student(args) -> int:
    cfg = parse_config(args.config)
    if args.baseline:
        summary = _train_one_student(cfg, BASELINE_LABEL, cfg.baseline["data_fraction"])
    else:
        summary = _train_one_student(cfg, "student_full", 1.0)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_distill(args) -> int:
    cfg = parse_config(args.config)
    if args.plan not in cfg.plan_names():
        raise ConfigError(f"/plans: no plan named {args.plan!r}")
    train_set, val_set = load_datasets(cfg)
    teacher_ckpt = ensure_teacher(cfg, train_set, val_set)
    seed = cfg.seeds[0]

    def worker(work: Path) -> dict:
        plan = cfg.build_plan(args.plan, teacher_ckpt, seed)
        ckpt, record = distill(plan, train_set, val_set, ckpt_path=work / "student.ckpt")
        emit_training_curves(record, work, stem="record", plot=cfg.plot_curves)
        return _evaluate_into(ckpt, val_set, work)

    summary = _run_unit(cfg.output_dir / args.plan / str(seed), worker)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    size = (args.image_size, args.image_size) if args.image_size else None
    dataset = build_dataset(DatasetSpec(args.data, image_size=size))
    report = evaluate_model(args.ckpt, dataset, threshold=args.threshold)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / "per_image.csv")
        report.to_json(out / "metrics.json")
    print(json.dumps(report.summary, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    table = run_ablation(cfg)
    print(f"results table: {cfg.output_dir / 'results.csv'} ({len(table.rows)} rows)")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    results = run_dir / "results.csv"
    if not results.exists():
        raise ConfigError(f"no results.csv under {run_dir}; run `ablate` first")
    table = ResultTable.from_csv(results)

    curve_dir = run_dir / "curves"
    curve_images: list[Path] = []
    for record_csv in sorted(run_dir.glob("*/*/record.csv")):
        label, seed = record_csv.parent.parent.name, record_csv.parent.name
        record = TrainingRecord.from_csv(record_csv)
        paths = emit_training_curves(record, curve_dir, stem=f"{label}_{seed}")
        curve_images.append(paths[-1])

    groups = collect_seed_metrics(run_dir, metric="iou")
    anova = None
    note = ""
    base = groups.get(BASELINE_LABEL, [])
    pooled = [v for label, vals in sorted(groups.items())
              if label not in (BASELINE_LABEL, "student_full") for v in vals]
    if len(base) >= 2 and len(pooled) >= 2:
        anova = one_way_anova([base, pooled])
        note = (
            f"Groups: `{BASELINE_LABEL}` final validation IoUs over {len(base)} seed(s) "
            f"vs all distilled runs pooled ({len(pooled)} run(s))."
        )
    out = render_report(
        [(run_dir.name, table)], run_dir / "report.md",
        anova=anova, anova_note=note, curve_images=curve_images,
    )
    print(f"report: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distillseg",
        description="Train multi-task segmentation teachers and distill compact students.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="slice NIfTI volumes into a PNG corpus")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("train-teacher", help="train (or reuse) the multi-task teacher")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-student", help="supervised student run (no teacher)")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline", action="store_true",
                   help="use the configured baseline data fraction instead of the full set")
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("distill", help="run one distillation plan")
    p.add_argument("--config", required=True)
    p.add_argument("--plan", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a PNG corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the full plan grid from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render markdown report for a finished run dir")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
