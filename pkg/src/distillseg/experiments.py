"""Config-driven experiment runner: ablation grids, tables, curves, report.

An experiment is one JSON file (schema v1, unknown keys rejected) naming a
dataset, a teacher, a student, a supervised baseline, and a list of
distillation plans. The runner sweeps plans x seeds into a results directory
laid out as <output_dir>/<plan>/<seed>/{ckpt, record.csv, metrics.json},
resumes interrupted grids, and aggregates everything into a CSV table whose
deltas are taken against the baseline row.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .data import (
    DatasetSpec,
    SliceDataset,
    build_dataset,
    make_synthetic_dataset,
    split_by_subject,
)
from .losses import LossWeights
from .metrics import AnovaResult, evaluate_model
from .models import ModelConfig, ROLE_STUDENT_S1, ROLE_STUDENT_S2, ROLE_TEACHER, build_model, count_parameters
from .train import (
    DistillationPlan,
    TrainingError,
    TrainingRecord,
    distill,
    train_student_baseline,
    train_teacher,
)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
BASELINE_LABEL = "baseline"


class ConfigError(ValueError):
    """Config rejected; the message starts with a JSON-pointer path."""


_WEIGHTS_SCHEMA = {
    "type": "object",
    "properties": {
        "w_seg": {"type": "number", "minimum": 0},
        "w_enc": {"type": "number", "minimum": 0},
        "w_bn": {"type": "number", "minimum": 0},
        "w_dec": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

_PLAN_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "scales": {
            "type": "array",
            "items": {"enum": ["encoder", "bottleneck", "decoder"]},
            "uniqueItems": True,
        },
        "distill_loss": {"enum": ["contrastive", "feature_mse"]},
        "pmd": {"type": "boolean"},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "optimizer": {"enum": ["adamw", "rmsprop"]},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "data_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "embed_dim": {"type": "integer", "minimum": 1},
        "weights": _WEIGHTS_SCHEMA,
        "contrastive_temperature": {"type": "number", "exclusiveMinimum": 0},
        "pmd_temperature": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["name"],
    "additionalProperties": False,
}

EXPERIMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "name": {"type": "string", "minLength": 1},
        "output_dir": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "plot_curves": {"type": "boolean"},
        "dataset": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["png", "synthetic"]},
                "source_dir": {"type": "string"},
                "n_samples": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 4},
                "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "teacher": {
            "type": "object",
            "properties": {
                "ckpt": {"type": ["string", "null"]},
                "base_channels": {"type": "integer", "minimum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lambda_rec": {"type": "number", "minimum": 0},
                "optimizer": {"enum": ["adamw", "rmsprop"]},
                "seed": {"type": "integer"},
            },
            "additionalProperties": False,
        },
        "student": {
            "type": "object",
            "properties": {
                "role": {"enum": [ROLE_STUDENT_S1, ROLE_STUDENT_S2]},
                "base_channels": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "baseline": {
            "type": "object",
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["adamw", "rmsprop"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "data_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "plans": {"type": "array", "items": _PLAN_SCHEMA, "minItems": 1},
    },
    "required": ["name", "dataset", "plans"],
    "additionalProperties": False,
}

_DATASET_DEFAULTS = {"kind": "synthetic", "n_samples": 200, "image_size": 64,
                     "fraction": 1.0, "val_fraction": 0.1, "seed": 0}
_TEACHER_DEFAULTS = {"ckpt": None, "base_channels": 64, "epochs": 200, "lr": 1e-4,
                     "batch_size": 8, "lambda_rec": 0.5, "optimizer": "adamw", "seed": 0}
_STUDENT_DEFAULTS = {"role": ROLE_STUDENT_S1, "base_channels": 16}
_BASELINE_DEFAULTS = {"epochs": 120, "batch_size": 8, "optimizer": "rmsprop",
                      "lr": 1e-3, "data_fraction": 1.0}
_PLAN_DEFAULTS = {"scales": ["bottleneck"], "distill_loss": "contrastive", "pmd": False,
                  "epochs": 120, "batch_size": 8, "optimizer": "rmsprop", "lr": 1e-3,
                  "data_fraction": 1.0, "embed_dim": 128,
                  "weights": {"w_seg": 1.0, "w_enc": 0.1, "w_bn": 0.1, "w_dec": 0.1},
                  "contrastive_temperature": 0.07, "pmd_temperature": 4.0}


def _filled(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """A fully validated, fully defaulted experiment description."""

    data: dict

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    @property
    def seeds(self) -> list[int]:
        return list(self.data["seeds"])

    @property
    def plot_curves(self) -> bool:
        return self.data["plot_curves"]

    @property
    def dataset(self) -> dict:
        return self.data["dataset"]

    @property
    def teacher(self) -> dict:
        return self.data["teacher"]

    @property
    def baseline(self) -> dict:
        return self.data["baseline"]

    def teacher_config(self) -> ModelConfig:
        return ModelConfig(role=ROLE_TEACHER, base_channels=self.teacher["base_channels"])

    def student_config(self) -> ModelConfig:
        s = self.data["student"]
        return ModelConfig(role=s["role"], base_channels=s["base_channels"])

    def plan_names(self) -> list[str]:
        return [p["name"] for p in self.data["plans"]]

    def build_plan(self, name: str, teacher_ckpt: str | Path, seed: int) -> DistillationPlan:
        for p in self.data["plans"]:
            if p["name"] == name:
                return DistillationPlan(
                    teacher_ckpt=teacher_ckpt,
                    student_cfg=self.student_config(),
                    scales=tuple(p["scales"]),
                    distill_loss=p["distill_loss"],
                    pmd=p["pmd"],
                    weights=LossWeights(**p["weights"]),
                    optimizer=p["optimizer"],
                    lr=p["lr"],
                    epochs=p["epochs"],
                    batch_size=p["batch_size"],
                    seed=seed,
                    data_fraction=p["data_fraction"],
                    embed_dim=p["embed_dim"],
                    contrastive_temperature=p["contrastive_temperature"],
                    pmd_temperature=p["pmd_temperature"],
                    name=name,
                )
        raise ConfigError(f"/plans: no plan named {name!r}")


def _schema_error_pointer(err: jsonschema.ValidationError) -> str:
    return "/" + "/".join(str(p) for p in err.absolute_path)


def validate_config_dict(raw: dict) -> ExperimentConfig:
    """Validate and default a config mapping. See parse_config for files."""
    validator = jsonschema.Draft202012Validator(EXPERIMENT_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_schema_error_pointer(e)}: {e.message}")

    data = {
        "version": CONFIG_VERSION,
        "name": raw["name"],
        "output_dir": raw.get("output_dir", str(Path("runs") / raw["name"])),
        "seeds": list(raw.get("seeds", [0])),
        "plot_curves": raw.get("plot_curves", True),
        "dataset": _filled(_DATASET_DEFAULTS, raw["dataset"]),
        "teacher": _filled(_TEACHER_DEFAULTS, raw.get("teacher", {})),
        "student": _filled(_STUDENT_DEFAULTS, raw.get("student", {})),
        "baseline": _filled(_BASELINE_DEFAULTS, raw.get("baseline", {})),
        "plans": [_filled(_PLAN_DEFAULTS, p) for p in raw["plans"]],
    }

    ds = data["dataset"]
    if ds["kind"] == "png" and "source_dir" not in ds:
        raise ConfigError("/dataset/source_dir: required when kind is 'png'")

    names = [p["name"] for p in data["plans"]]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})[0]
        raise ConfigError(f"/plans: duplicate plan name {dup!r}")
    if BASELINE_LABEL in names:
        raise ConfigError(f"/plans: plan name {BASELINE_LABEL!r} is reserved")
    for i, p in enumerate(data["plans"]):
        if not p["scales"] and not p["pmd"]:
            raise ConfigError(
                f"/plans/{i}: a plan with no scales must enable prediction-map distillation"
            )
    cfg = ExperimentConfig(data=data)
    # constructing every plan exercises the remaining invariants early
    for n in names:
        cfg.build_plan(n, teacher_ckpt="unset", seed=0)
    return cfg


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load, validate, and default a JSON experiment config."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("/: config root must be a JSON object")
    return validate_config_dict(raw)


def emit_defaults(cfg: ExperimentConfig) -> dict:
    """The fully defaulted config; re-parsing it reproduces cfg exactly."""
    return copy.deepcopy(cfg.data)


# ---------------------------------------------------------------------------
# Result table
# ---------------------------------------------------------------------------

_METRIC_KEYS = ("iou", "dice", "recall", "precision")


@dataclass
class ResultRow:
    label: str
    iou: float | None = None
    dice: float | None = None
    recall: float | None = None
    precision: float | None = None
    params_m: float | None = None
    deltas: dict[str, float | None] = field(default_factory=dict)
    error: str | None = None


@dataclass
class ResultTable:
    """Seed-averaged rows, baseline first, deltas against the baseline."""

    rows: list[ResultRow]
    baseline_label: str = BASELINE_LABEL

    def baseline_row(self) -> ResultRow | None:
        for r in self.rows:
            if r.label == self.baseline_label:
                return r
        return None

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)

        def cell(v):
            return "" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["method", "iou", "dice", "recall", "precision", "params_m",
                 "delta_iou_pct", "delta_dice_pct", "delta_recall_pct",
                 "delta_precision_pct", "status"]
            )
            for r in self.rows:
                w.writerow(
                    [r.label, cell(r.iou), cell(r.dice), cell(r.recall), cell(r.precision),
                     cell(r.params_m)]
                    + [cell(r.deltas.get(k)) for k in _METRIC_KEYS]
                    + [f"FAILED: {r.error}" if r.error else "ok"]
                )
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "ResultTable":
        def val(s):
            return float(s) if s else None

        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                status = row[10]
                rows.append(
                    ResultRow(
                        label=row[0],
                        iou=val(row[1]), dice=val(row[2]), recall=val(row[3]),
                        precision=val(row[4]), params_m=val(row[5]),
                        deltas={k: val(row[6 + i]) for i, k in enumerate(_METRIC_KEYS)},
                        error=status[8:] if status.startswith("FAILED: ") else None,
                    )
                )
        return cls(rows=rows)


def delta_pct(value: float, baseline: float) -> float:
    return 100.0 * (value - baseline) / baseline


def _attach_deltas(table: ResultTable) -> None:
    base = table.baseline_row()
    for r in table.rows:
        if r.label == table.baseline_label or r.error is not None:
            continue
        for k in _METRIC_KEYS:
            bv = getattr(base, k) if base is not None else None
            v = getattr(r, k)
            r.deltas[k] = delta_pct(v, bv) if v is not None and bv else None


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------


def load_datasets(cfg: ExperimentConfig) -> tuple[SliceDataset, SliceDataset]:
    d = cfg.dataset
    if d["kind"] == "synthetic":
        full = make_synthetic_dataset(d["n_samples"], d["image_size"], d["seed"])
    else:
        size = (d["image_size"], d["image_size"]) if "image_size" in d else None
        full = build_dataset(
            DatasetSpec(d["source_dir"], fraction=d["fraction"], seed=d["seed"], image_size=size)
        )
    return split_by_subject(full, d["val_fraction"], d["seed"])


def ensure_teacher(
    cfg: ExperimentConfig, train_set: SliceDataset, val_set: SliceDataset
) -> Path:
    """Reuse the configured teacher checkpoint or train one into the run dir."""
    if cfg.teacher["ckpt"]:
        path = Path(cfg.teacher["ckpt"])
        if not path.exists():
            raise ConfigError(f"/teacher/ckpt: checkpoint not found: {path}")
        return path
    path = cfg.output_dir / "teacher" / "teacher.ckpt"
    if path.exists():
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    t = cfg.teacher
    _, record = train_teacher(
        train_set,
        cfg.teacher_config(),
        val_set=val_set,
        epochs=t["epochs"],
        lr=t["lr"],
        batch_size=t["batch_size"],
        lambda_rec=t["lambda_rec"],
        optimizer=t["optimizer"],
        seed=t["seed"],
        ckpt_path=path,
    )
    emit_training_curves(record, path.parent, stem="record", plot=cfg.plot_curves)
    return path


def _run_unit(final_dir: Path, worker) -> dict:
    """Run one (plan, seed) unit with resume-by-presence and atomic publish.

    A unit is complete exactly when final_dir/metrics.json exists; work
    happens in a .tmp sibling that is renamed into place at the end.
    """
    metrics_path = final_dir / "metrics.json"
    if metrics_path.exists():
        logger.info("reusing completed run %s", final_dir)
        return json.loads(metrics_path.read_text())
    work = final_dir.parent / (final_dir.name + ".tmp")
    if work.exists():
        shutil.rmtree(work)
    work.mkdir(parents=True)
    summary = worker(work)
    if final_dir.exists():
        shutil.rmtree(final_dir)
    os.replace(work, final_dir)
    return summary


def _evaluate_into(ckpt_path: Path, val_set: SliceDataset, out_dir: Path) -> dict:
    report = evaluate_model(ckpt_path, val_set)
    report.to_csv(out_dir / "per_image.csv")
    report.to_json(out_dir / "metrics.json")
    return json.loads((out_dir / "metrics.json").read_text())


def run_ablation(cfg: ExperimentConfig) -> ResultTable:
    """Sweep baseline + every plan over cfg.seeds and aggregate the table.

    Failures become FAILED rows instead of aborting the grid. The table is
    also written to <output_dir>/results.csv.
    """
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set = load_datasets(cfg)
    teacher_ckpt = ensure_teacher(cfg, train_set, val_set)
    student_cfg = cfg.student_config()
    params_m = count_parameters(build_model(student_cfg)) / 1e6

    def baseline_worker_for(seed: int):
        def worker(work: Path) -> dict:
            b = cfg.baseline
            ckpt, record = train_student_baseline(
                train_set,
                student_cfg,
                val_set=val_set,
                epochs=b["epochs"],
                lr=b["lr"],
                batch_size=b["batch_size"],
                optimizer=b["optimizer"],
                seed=seed,
                data_fraction=b["data_fraction"],
                ckpt_path=work / "student.ckpt",
            )
            emit_training_curves(record, work, stem="record", plot=cfg.plot_curves)
            return _evaluate_into(ckpt, val_set, work)

        return worker

    def plan_worker_for(name: str, seed: int):
        def worker(work: Path) -> dict:
            plan = cfg.build_plan(name, teacher_ckpt, seed)
            ckpt, record = distill(plan, train_set, val_set, ckpt_path=work / "student.ckpt")
            emit_training_curves(record, work, stem="record", plot=cfg.plot_curves)
            return _evaluate_into(ckpt, val_set, work)

        return worker

    def aggregate(label: str, worker_for) -> ResultRow:
        summaries = []
        try:
            for seed in cfg.seeds:
                summaries.append(_run_unit(out_dir / label / str(seed), worker_for(seed)))
        except Exception as e:  # noqa: BLE001 - grid must survive unit failures
            logger.exception("run %s failed", label)
            msg = str(e).splitlines()[0] if str(e) else type(e).__name__
            return ResultRow(label=label, params_m=params_m, error=msg)
        n = len(summaries)
        return ResultRow(
            label=label,
            iou=sum(s["iou"] for s in summaries) / n,
            dice=sum(s["dice"] for s in summaries) / n,
            recall=sum(s["recall"] for s in summaries) / n,
            precision=sum(s["precision"] for s in summaries) / n,
            params_m=params_m,
        )

    rows = [aggregate(BASELINE_LABEL, baseline_worker_for)]
    for name in cfg.plan_names():
        rows.append(aggregate(name, lambda seed, _n=name: plan_worker_for(_n, seed)))
    table = ResultTable(rows=rows)
    _attach_deltas(table)
    table.to_csv(out_dir / "results.csv")
    return table


def collect_seed_metrics(run_dir: str | Path, metric: str = "iou") -> dict[str, list[float]]:
    """Per-label lists of one metric, read back from unit metrics.json files."""
    run_dir = Path(run_dir)
    out: dict[str, list[float]] = {}
    for label_dir in sorted(p for p in run_dir.iterdir() if p.is_dir()):
        if label_dir.name == "teacher":
            continue
        values = []
        for seed_dir in sorted(
            (p for p in label_dir.iterdir() if p.is_dir() and p.name.lstrip("-").isdigit()),
            key=lambda p: int(p.name),
        ):
            mpath = seed_dir / "metrics.json"
            if mpath.exists():
                values.append(json.loads(mpath.read_text())[metric])
        if values:
            out[label_dir.name] = values
    return out


# ---------------------------------------------------------------------------
# Curves and report
# ---------------------------------------------------------------------------


def emit_training_curves(
    record: TrainingRecord, out_dir: str | Path, stem: str = "curves", plot: bool = True
) -> list[Path]:
    """Persist a record as CSV, plus a train/val loss plot when enabled."""
    if not record.rows:
        raise TrainingError("cannot emit curves for an empty record")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [record.to_csv(out_dir / f"{stem}.csv")]
    if plot:
        epochs = [r.epoch for r in record.rows]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, [r.train_total for r in record.rows], label="train")
        val = [(e, r.val_total) for e, r in zip(epochs, record.rows)
               if r.val_total == r.val_total]
        if val:
            ax.plot([v[0] for v in val], [v[1] for v in val], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        png = out_dir / f"{stem}.png"
        fig.savefig(png)
        plt.close(fig)
        paths.append(png)
    return paths


def _fmt(v: float | None, digits: int = 3) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def _row_cells(r: ResultRow, bold: bool) -> list[str]:
    def metric(k: str) -> str:
        v = getattr(r, k)
        if v is None:
            return "FAILED"
        s = _fmt(v)
        d = r.deltas.get(k)
        if d is not None:
            s += f" ({d:+.1f}%)"
        return s

    label = r.label
    cells = [label] + [metric(k) for k in _METRIC_KEYS] + [_fmt(r.params_m)]
    if bold:
        cells = [f"**{c}**" for c in cells]
    return cells


def render_report(
    tables: list[tuple[str, ResultTable]],
    out_path: str | Path,
    anova: AnovaResult | None = None,
    anova_note: str = "",
    curve_images: list[Path] | None = None,
) -> Path:
    """Write the markdown report: tables (best IoU row bold, baseline row
    first), optional curve images, and the ANOVA block."""
    if not tables:
        raise ValueError("render_report needs at least one table")
    out_path = Path(out_path)
    lines: list[str] = ["# Results", ""]
    for title, table in tables:
        ordered = sorted(table.rows, key=lambda r: r.label != table.baseline_label)
        scored = [r for r in ordered if r.iou is not None]
        best = max(scored, key=lambda r: r.iou) if scored else None
        lines += [f"## {title}", ""]
        lines.append("| Method | IoU | Dice | Recall | Precision | Params (M) |")
        lines.append("| --- | --- | --- | --- | --- | --- |")
        for r in ordered:
            lines.append("| " + " | ".join(_row_cells(r, bold=r is best)) + " |")
        lines.append("")
    if curve_images:
        lines += ["## Training curves", ""]
        for img in curve_images:
            rel = os.path.relpath(img, out_path.parent)
            lines.append(f"![{Path(img).stem}]({rel})")
        lines.append("")
    lines += ["## Statistical comparison", ""]
    if anova is None:
        lines.append("Not enough runs for a one-way ANOVA (need two groups with two seeds each).")
    else:
        lines.append(
            f"One-way ANOVA: F = {anova.f_stat:.3f}, p = {anova.p_value:.3f} "
            f"(df between = {anova.df_between}, df within = {anova.df_within}). "
            f"Group means: {', '.join(f'{m:.3f}' for m in anova.group_means)}."
        )
        if anova_note:
            lines.append("")
            lines.append(anova_note)
    lines.append("")
    out_path.write_text("\n".join(lines))
    return out_path
