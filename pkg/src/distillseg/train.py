"""Training engines: multi-task teacher, supervised student, distillation.

All three loops share the same skeleton: seeded model construction, seeded
batch order from a numpy generator (decoupled from torch's RNG so model init
stays stable), one optimizer step per batch, per-epoch train/val rows in a
TrainingRecord, and a checkpoint at the end. No early stopping and no LR
schedule anywhere.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import SCALES, SliceDataset, subsample_by_subject
from .losses import (
    LossWeights,
    dice_loss,
    dice_bce_loss,
    feature_mse_loss,
    pmd_loss,
    recon_mse_loss,
    scale_contrastive_loss,
    student_total_loss,
    teacher_total_loss,
)
from .models import (
    FeatureAdapter,
    ModelConfig,
    ProjectionHead,
    ROLE_TEACHER,
    build_model,
    forward_with_taps,
    freeze,
    load_checkpoint,
    save_checkpoint,
)

DISTILL_LOSSES = ("contrastive", "feature_mse")
OPTIMIZERS = ("adamw", "rmsprop")


class TrainingError(ValueError):
    pass


@dataclass
class EpochRow:
    epoch: int
    train_total: float
    val_total: float
    components: dict[str, float]
    seconds: float


@dataclass
class TrainingRecord:
    """Per-epoch loss curves plus run metadata."""

    columns: list[str]
    rows: list[EpochRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_total", "val_total", *self.columns, "seconds"])
            for r in self.rows:
                w.writerow(
                    [r.epoch, f"{r.train_total:.6f}", f"{r.val_total:.6f}"]
                    + [f"{r.components[c]:.6f}" for c in self.columns]
                    + [f"{r.seconds:.3f}"]
                )
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "TrainingRecord":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:3] != ["epoch", "train_total", "val_total"] or header[-1] != "seconds":
                raise TrainingError(f"{path}: unrecognized record header {header}")
            columns = header[3:-1]
            rec = cls(columns=columns)
            for row in reader:
                rec.rows.append(
                    EpochRow(
                        epoch=int(row[0]),
                        train_total=float(row[1]),
                        val_total=float(row[2]),
                        components={c: float(v) for c, v in zip(columns, row[3:-1])},
                        seconds=float(row[-1]),
                    )
                )
        return rec


@dataclass
class DistillationPlan:
    """Everything one distillation run needs besides the data itself."""

    teacher_ckpt: str | Path
    student_cfg: ModelConfig
    scales: tuple[str, ...] = ("bottleneck",)
    distill_loss: str = "contrastive"
    pmd: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    epochs: int = 120
    batch_size: int = 8
    seed: int = 0
    data_fraction: float = 1.0
    embed_dim: int = 128
    contrastive_temperature: float = 0.07
    pmd_temperature: float = 4.0
    name: str = "plan"

    def __post_init__(self):
        bad = set(self.scales) - set(SCALES)
        if bad:
            raise TrainingError(f"unknown scales {sorted(bad)}, expected subset of {SCALES}")
        self.scales = tuple(s for s in SCALES if s in set(self.scales))
        if not self.scales and not self.pmd:
            raise TrainingError("a plan with no scales must enable prediction-map distillation")
        if self.distill_loss not in DISTILL_LOSSES:
            raise TrainingError(f"distill_loss must be one of {DISTILL_LOSSES}, got {self.distill_loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainingError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise TrainingError(f"data_fraction must be in (0, 1], got {self.data_fraction}")


def _make_optimizer(name: str, params, lr: float):
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr)
    if name == "rmsprop":
        return torch.optim.RMSprop(params, lr=lr, alpha=0.99)
    raise TrainingError(f"unknown optimizer {name!r}")


def _iter_batches(dataset: SliceDataset, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        chunk = [int(i) for i in order[start : start + batch_size]]
        pairs = [dataset[i] for i in chunk]
        if any(y is None for _, y in pairs):
            raise TrainingError("training needs a labeled dataset")
        yield torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


def _val_batches(dataset: SliceDataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        pairs = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        yield torch.stack([p[0] for p in pairs]), torch.stack([p[1] for p in pairs])


class _Averager:
    """Accumulate per-batch component values into epoch means."""

    def __init__(self, columns: list[str]):
        self.columns = columns
        self.sums = {c: 0.0 for c in ["total", *columns]}
        self.n = 0

    def add(self, total: float, components: dict[str, float]) -> None:
        self.sums["total"] += total
        for c in self.columns:
            self.sums[c] += components.get(c, 0.0)
        self.n += 1

    def mean(self, key: str) -> float:
        return self.sums[key] / self.n if self.n else float("nan")


def train_teacher(
    train_set: SliceDataset,
    cfg: ModelConfig | None = None,
    *,
    val_set: SliceDataset | None = None,
    epochs: int = 200,
    lr: float = 1e-4,
    batch_size: int = 8,
    lambda_rec: float = 0.5,
    optimizer: str = "adamw",
    seed: int = 0,
    ckpt_path: str | Path,
) -> tuple[Path, TrainingRecord]:
    """Fit the multi-task teacher: dice+BCE segmentation plus weighted MSE
    reconstruction through the shared encoder."""
    cfg = cfg or ModelConfig(role=ROLE_TEACHER)
    if cfg.role != ROLE_TEACHER:
        raise TrainingError(f"train_teacher needs the teacher role, got {cfg.role!r}")
    if len(train_set) == 0:
        raise TrainingError("training set is empty")
    if epochs < 1:
        raise TrainingError(f"epochs must be >= 1, got {epochs}")

    torch.manual_seed(seed)
    model = build_model(cfg)
    opt = _make_optimizer(optimizer, model.parameters(), lr)
    rng = np.random.default_rng(seed)
    columns = ["seg", "recon"]
    record = TrainingRecord(columns=columns, meta={"seed": seed, "lambda_rec": lambda_rec})

    def batch_loss(x, y):
        out = forward_with_taps(model, x)
        seg = dice_bce_loss(out.seg_logits, y)
        rec = recon_mse_loss(out.recon, x)
        total = teacher_total_loss(seg, rec, lambda_rec)
        return total, {"seg": float(seg.detach()), "recon": float(rec.detach())}

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        avg = _Averager(columns)
        for x, y in _iter_batches(train_set, batch_size, rng):
            total, comps = batch_loss(x, y)
            opt.zero_grad()
            total.backward()
            opt.step()
            avg.add(float(total.detach()), comps)
        val_total = float("nan")
        if val_set is not None and len(val_set):
            model.eval()
            vavg = _Averager([])
            with torch.no_grad():
                for x, y in _val_batches(val_set, batch_size):
                    total, _ = batch_loss(x, y)
                    vavg.add(float(total), {})
            val_total = vavg.mean("total")
        record.rows.append(
            EpochRow(epoch, avg.mean("total"), val_total,
                     {c: avg.mean(c) for c in columns}, time.perf_counter() - t0)
        )

    path = save_checkpoint(model, ckpt_path, step=epochs, seed=seed,
                           extra={"lambda_rec": lambda_rec})
    return path, record


def train_student_baseline(
    train_set: SliceDataset,
    cfg: ModelConfig,
    *,
    val_set: SliceDataset | None = None,
    epochs: int = 120,
    lr: float = 1e-3,
    batch_size: int = 8,
    optimizer: str = "rmsprop",
    seed: int = 0,
    data_fraction: float = 1.0,
    ckpt_path: str | Path,
) -> tuple[Path, TrainingRecord]:
    """Supervised reference run: the student alone, pure dice loss."""
    if cfg.role == ROLE_TEACHER:
        raise TrainingError("train_student_baseline needs a student role")
    if epochs < 1:
        raise TrainingError(f"epochs must be >= 1, got {epochs}")
    if data_fraction < 1.0:
        train_set = subsample_by_subject(train_set, data_fraction, seed)
    if len(train_set) == 0:
        raise TrainingError("training set is empty")

    torch.manual_seed(seed)
    model = build_model(cfg)
    opt = _make_optimizer(optimizer, model.parameters(), lr)
    rng = np.random.default_rng(seed)
    record = TrainingRecord(columns=["seg"],
                            meta={"seed": seed, "data_fraction": data_fraction})

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        model.train()
        avg = _Averager(["seg"])
        for x, y in _iter_batches(train_set, batch_size, rng):
            out = forward_with_taps(model, x)
            seg = dice_loss(torch.sigmoid(out.seg_logits), y)
            opt.zero_grad()
            seg.backward()
            opt.step()
            avg.add(float(seg.detach()), {"seg": float(seg.detach())})
        val_total = float("nan")
        if val_set is not None and len(val_set):
            model.eval()
            vavg = _Averager([])
            with torch.no_grad():
                for x, y in _val_batches(val_set, batch_size):
                    out = model(x)
                    vavg.add(float(dice_loss(torch.sigmoid(out.seg_logits), y)), {})
            val_total = vavg.mean("total")
        record.rows.append(
            EpochRow(epoch, avg.mean("total"), val_total,
                     {"seg": avg.mean("seg")}, time.perf_counter() - t0)
        )

    path = save_checkpoint(model, ckpt_path, step=epochs, seed=seed,
                           extra={"data_fraction": data_fraction})
    return path, record


def _build_aux(plan: DistillationPlan, student, teacher) -> nn.ModuleDict:
    """Projection heads (contrastive) or channel adapters (feature MSE),
    one per active scale, trained jointly with the student."""
    s_ch = student.tap_channels()
    t_ch = teacher.tap_channels()
    aux = nn.ModuleDict()
    for scale in plan.scales:
        if plan.distill_loss == "contrastive":
            aux[f"proj_{scale}_student"] = ProjectionHead(s_ch[scale], plan.embed_dim)
            aux[f"proj_{scale}_teacher"] = ProjectionHead(t_ch[scale], plan.embed_dim)
        else:
            aux[f"adapt_{scale}"] = FeatureAdapter(s_ch[scale], t_ch[scale])
    return aux


def distill(
    plan: DistillationPlan,
    train_set: SliceDataset,
    val_set: SliceDataset | None = None,
    *,
    ckpt_path: str | Path,
    teacher: nn.Module | None = None,
) -> tuple[Path, TrainingRecord]:
    """Distill a frozen teacher into a student per the plan.

    Each step optimizes w_seg*dice + per-scale distillation terms + optional
    prediction-map distillation; only the student and the auxiliary heads
    receive gradients. The plan's data fraction is applied here at subject
    granularity so paired baseline runs see the same subset. An already
    loaded teacher module may be passed to skip the checkpoint read.
    """
    if teacher is None:
        teacher, _ = load_checkpoint(plan.teacher_ckpt)
    if teacher.config.role != ROLE_TEACHER:
        raise TrainingError(
            f"distillation teacher has role {teacher.config.role!r}, expected {ROLE_TEACHER!r}"
        )
    freeze(teacher)

    if plan.data_fraction < 1.0:
        train_set = subsample_by_subject(train_set, plan.data_fraction, plan.seed)
    if len(train_set) == 0:
        raise TrainingError("training set is empty")

    torch.manual_seed(plan.seed)
    student = build_model(plan.student_cfg)
    aux = _build_aux(plan, student, teacher)
    params = list(student.parameters()) + list(aux.parameters())
    opt = _make_optimizer(plan.optimizer, params, plan.lr)
    rng = np.random.default_rng(plan.seed)

    projector_map = {}
    if plan.distill_loss == "contrastive":
        projector_map = {
            scale: (aux[f"proj_{scale}_student"], aux[f"proj_{scale}_teacher"])
            for scale in plan.scales
        }
    # scales outside the plan are disabled outright, whatever their weight
    weights = LossWeights(
        w_seg=plan.weights.w_seg,
        w_enc=plan.weights.w_enc if "encoder" in plan.scales else 0.0,
        w_bn=plan.weights.w_bn if "bottleneck" in plan.scales else 0.0,
        w_dec=plan.weights.w_dec if "decoder" in plan.scales else 0.0,
    )
    slot_by_scale = {"encoder": "con_enc", "bottleneck": "con_bn", "decoder": "con_dec"}
    columns = ["seg"] + [slot_by_scale[s] for s in plan.scales] + (["pmd"] if plan.pmd else [])
    record = TrainingRecord(
        columns=columns,
        meta={
            "plan": plan.name,
            "seed": plan.seed,
            "data_fraction": plan.data_fraction,
            "scales": list(plan.scales),
            "distill_loss": plan.distill_loss,
            "pmd": plan.pmd,
            "weights": weights.to_dict(),
        },
    )

    def batch_breakdown(x, y):
        with torch.no_grad():
            t_out = teacher(x)
        s_out = forward_with_taps(student, x)
        seg = dice_loss(torch.sigmoid(s_out.seg_logits), y)
        per_scale = {}
        for scale in plan.scales:
            if plan.distill_loss == "contrastive":
                per_scale[slot_by_scale[scale]] = scale_contrastive_loss(
                    t_out.taps, s_out.taps, projector_map, scale, plan.contrastive_temperature
                )
            else:
                per_scale[slot_by_scale[scale]] = feature_mse_loss(
                    t_out.taps, s_out.taps, scale, aux[f"adapt_{scale}"]
                )
        pmd = None
        if plan.pmd:
            pmd = pmd_loss(s_out.seg_logits, t_out.seg_logits, plan.pmd_temperature)
        return student_total_loss(weights, seg, pmd=pmd, **per_scale)

    for epoch in range(1, plan.epochs + 1):
        t0 = time.perf_counter()
        student.train()
        aux.train()
        avg = _Averager(columns)
        for x, y in _iter_batches(train_set, plan.batch_size, rng):
            bd = batch_breakdown(x, y)
            opt.zero_grad()
            bd.total.backward()
            opt.step()
            floats = bd.as_floats()
            comps = {"seg": floats["seg"]}
            for scale in plan.scales:
                comps[slot_by_scale[scale]] = floats[slot_by_scale[scale]]
            if plan.pmd:
                comps["pmd"] = floats["pmd"]
            avg.add(floats["total"], comps)
        val_total = float("nan")
        if val_set is not None and len(val_set):
            student.eval()
            aux.eval()
            vavg = _Averager([])
            with torch.no_grad():
                for x, y in _val_batches(val_set, plan.batch_size):
                    vavg.add(batch_breakdown(x, y).as_floats()["total"], {})
            val_total = vavg.mean("total")
        record.rows.append(
            EpochRow(epoch, avg.mean("total"), val_total,
                     {c: avg.mean(c) for c in columns}, time.perf_counter() - t0)
        )

    path = save_checkpoint(
        student,
        ckpt_path,
        step=plan.epochs,
        seed=plan.seed,
        extra={"plan": record.meta},
        aux=aux,
    )
    return path, record
