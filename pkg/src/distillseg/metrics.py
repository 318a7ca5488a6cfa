"""Segmentation metrics, PSNR, corpus evaluation, and one-way ANOVA."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import special as sp_special

from .data import SliceDataset
from .models import load_checkpoint


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary_array(x, what: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise MetricInputError(f"{what} is not binary, found values {uniq[:5]}")
    return arr.astype(np.int64)


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    """Pixelwise TP/FP/FN/TN tallies over two binary masks."""
    pred = _as_binary_array(pred_mask, "pred_mask")
    gt = _as_binary_array(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise MetricInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(((pred == 1) & (gt == 1)).sum())
    fp = int(((pred == 1) & (gt == 0)).sum())
    fn = int(((pred == 0) & (gt == 1)).sum())
    tn = int(((pred == 0) & (gt == 0)).sum())
    return ConfusionCounts(tp, fp, fn, tn)


def iou(counts: ConfusionCounts) -> float:
    """tp/(tp+fp+fn); both masks empty scores 1.0."""
    denom = counts.tp + counts.fp + counts.fn
    return counts.tp / denom if denom else 1.0


def dice_coef(counts: ConfusionCounts) -> float:
    """2tp/(2tp+fp+fn); both masks empty scores 1.0."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    return 2 * counts.tp / denom if denom else 1.0


def precision(counts: ConfusionCounts) -> float:
    """tp/(tp+fp); with no positive predictions at all, scores 1.0."""
    denom = counts.tp + counts.fp
    return counts.tp / denom if denom else 1.0


def recall(counts: ConfusionCounts) -> float:
    """tp/(tp+fn); with no positive ground truth at all, scores 1.0."""
    denom = counts.tp + counts.fn
    return counts.tp / denom if denom else 1.0


def psnr(recon, image, max_value: float = 255.0) -> float:
    """10*log10(max^2 / MSE) in dB; identical inputs return +inf."""
    a = np.asarray(recon, dtype=np.float64)
    b = np.asarray(image, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricInputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


# ---------------------------------------------------------------------------
# Corpus evaluation
# ---------------------------------------------------------------------------


@dataclass
class PerImageRow:
    key: str
    iou: float
    dice: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    """Per-image metric rows plus their corpus means."""

    rows: list[PerImageRow]
    summary: dict[str, float]
    psnr: float | None = None

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "iou", "dice", "precision", "recall"])
            for r in self.rows:
                w.writerow([r.key, f"{r.iou:.6f}", f"{r.dice:.6f}",
                            f"{r.precision:.6f}", f"{r.recall:.6f}"])
        return path

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        payload = dict(self.summary)
        if self.psnr is not None:
            payload["psnr"] = self.psnr
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path


def evaluate_model(
    model_or_ckpt,
    dataset: SliceDataset,
    threshold: float = 0.5,
    batch_size: int = 8,
) -> MetricsReport:
    """Score a segmentation model over a labeled slice corpus.

    Predictions are sigmoid(logits) > threshold per pixel; per-image metrics
    are averaged into the summary. When the model also reconstructs its
    input, mean PSNR over the corpus is reported alongside.
    """
    if isinstance(model_or_ckpt, (str, Path)):
        model, _ = load_checkpoint(model_or_ckpt)
    else:
        model = model_or_ckpt
    model.eval()

    rows: list[PerImageRow] = []
    psnr_values: list[float] = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = range(start, min(start + batch_size, len(dataset)))
            pairs = [dataset[i] for i in idx]
            if any(y is None for _, y in pairs):
                raise MetricInputError("evaluate_model needs a labeled dataset")
            x = torch.stack([p[0] for p in pairs])
            y = torch.stack([p[1] for p in pairs])
            out = model(x)
            pred = (torch.sigmoid(out.seg_logits) > threshold).long()
            for j, i in enumerate(idx):
                counts = confusion_counts(pred[j, 0], y[j, 0].long())
                rows.append(
                    PerImageRow(
                        key=dataset.samples[i].key,
                        iou=iou(counts),
                        dice=dice_coef(counts),
                        precision=precision(counts),
                        recall=recall(counts),
                    )
                )
                if out.recon is not None:
                    psnr_values.append(
                        psnr(out.recon[j].numpy() * 255.0, x[j].numpy() * 255.0)
                    )
    summary = {
        "iou": float(np.mean([r.iou for r in rows])),
        "dice": float(np.mean([r.dice for r in rows])),
        "recall": float(np.mean([r.recall for r in rows])),
        "precision": float(np.mean([r.precision for r in rows])),
        "n_images": len(rows),
    }
    mean_psnr = None
    if psnr_values:
        finite = [v for v in psnr_values if math.isfinite(v)]
        mean_psnr = float(np.mean(finite)) if finite else math.inf
    return MetricsReport(rows=rows, summary=summary, psnr=mean_psnr)


# ---------------------------------------------------------------------------
# One-way ANOVA
# ---------------------------------------------------------------------------


@dataclass
class AnovaResult:
    f_stat: float
    p_value: float
    df_between: int
    df_within: int
    group_means: list[float]


def one_way_anova(groups: Sequence[Sequence[float]]) -> AnovaResult:
    """Classic one-way F test across two or more groups.

    Sums of squares are accumulated by hand; the p-value comes from the
    F-distribution survival function. Zero within-group variance maps to
    F = 0 (when between-variance is also zero) or +inf.
    """
    if len(groups) < 2:
        raise MetricInputError(f"need at least 2 groups, got {len(groups)}")
    data = [list(map(float, g)) for g in groups]
    if any(len(g) < 2 for g in data):
        raise MetricInputError("every group needs at least 2 samples")
    k = len(data)
    n_total = sum(len(g) for g in data)
    grand_mean = sum(sum(g) for g in data) / n_total
    means = [sum(g) / len(g) for g in data]
    ss_between = sum(len(g) * (m - grand_mean) ** 2 for g, m in zip(data, means))
    ss_within = sum(sum((x - m) ** 2 for x in g) for g, m in zip(data, means))
    df_between = k - 1
    df_within = n_total - k
    if ss_within == 0.0:
        f_stat = 0.0 if ss_between == 0.0 else math.inf
        p_value = 1.0 if ss_between == 0.0 else 0.0
    else:
        f_stat = (ss_between / df_between) / (ss_within / df_within)
        p_value = float(sp_special.fdtrc(df_between, df_within, f_stat))
    return AnovaResult(
        f_stat=f_stat,
        p_value=p_value,
        df_between=df_between,
        df_within=df_within,
        group_means=means,
    )
