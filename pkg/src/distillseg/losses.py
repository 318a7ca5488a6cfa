"""Training objectives for the teacher, the students, and distillation.

Everything here is a pure function over tensors so gradients can be checked
by finite differences. Teacher-side inputs are always detached before use;
optimization must only ever reach the student and the auxiliary heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import SCALES
from .models import FeatureAdapter, FeatureTaps, ProjectionHead, project

DICE_SMOOTH = 1e-6


class LossInputError(ValueError):
    """Raised when loss inputs violate their shape or range contracts."""


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossInputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft dice loss with global sums over the whole batch.

    1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s); empty prediction and
    target give 0 loss thanks to the smoothing term.
    """
    _check_same_shape(probs, targets, "dice_loss")
    p = probs.reshape(-1)
    t = targets.reshape(-1)
    inter = (p * t).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + t.sum() + smooth)


def dice_bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits plus soft dice on sigmoids."""
    _check_same_shape(logits, targets, "dice_bce_loss")
    bce = F.binary_cross_entropy_with_logits(logits, targets)
    return bce + dice_loss(torch.sigmoid(logits), targets)


def recon_mse_loss(recon: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Mean squared error between reconstruction and input, both in [0, 1]."""
    _check_same_shape(recon, image, "recon_mse_loss")
    return F.mse_loss(recon, image)


def teacher_total_loss(
    seg_loss: torch.Tensor, recon_loss: torch.Tensor, lambda_rec: float
) -> torch.Tensor:
    """Segmentation term plus lambda-weighted reconstruction term."""
    if lambda_rec < 0:
        raise LossInputError(f"lambda_rec must be non-negative, got {lambda_rec}")
    return seg_loss + lambda_rec * recon_loss


def info_nce_loss(
    anchors: torch.Tensor, positives: torch.Tensor, tau: float = 0.07
) -> torch.Tensor:
    """InfoNCE over matched embedding rows with in-batch negatives.

    Row i of anchors is pulled toward row i of positives and pushed from
    every other row: cross-entropy over the (B, B) cosine-similarity matrix
    scaled by 1/tau. Both inputs must be L2-normalized (B, D); a batch of
    one has no negatives and scores zero.
    """
    if anchors.ndim != 2 or positives.ndim != 2:
        raise LossInputError(
            f"embeddings must be 2D (B, D), got {tuple(anchors.shape)} and {tuple(positives.shape)}"
        )
    _check_same_shape(anchors, positives, "info_nce_loss")
    if anchors.shape[0] == 0:
        raise LossInputError("info_nce_loss: empty batch")
    if tau <= 0:
        raise LossInputError(f"temperature must be positive, got {tau}")
    for name, emb in (("anchors", anchors), ("positives", positives)):
        norms = emb.detach().norm(dim=1)
        if (norms - 1.0).abs().max().item() > 1e-3:
            raise LossInputError(f"info_nce_loss: {name} are not unit-normalized")
    logits = anchors @ positives.t() / tau
    labels = torch.arange(anchors.shape[0], device=anchors.device)
    return F.cross_entropy(logits, labels)


def scale_contrastive_loss(
    teacher_taps: FeatureTaps,
    student_taps: FeatureTaps,
    projectors: dict[str, tuple[ProjectionHead, ProjectionHead]],
    scale: str,
    tau: float = 0.07,
) -> torch.Tensor:
    """Contrastive alignment at one tap scale.

    projectors maps scale -> (student head, teacher head). The teacher tap
    is detached so only the student and both heads receive gradients.
    """
    if scale not in SCALES:
        raise LossInputError(f"unknown scale {scale!r}, expected one of {SCALES}")
    if scale not in projectors:
        raise LossInputError(f"no projectors registered for scale {scale!r}")
    student_head, teacher_head = projectors[scale]
    z_s = project(student_head, student_taps.get(scale))
    z_t = project(teacher_head, teacher_taps.get(scale).detach())
    return info_nce_loss(z_s, z_t, tau)


def feature_mse_loss(
    teacher_taps: FeatureTaps,
    student_taps: FeatureTaps,
    scale: str,
    adapter: FeatureAdapter,
) -> torch.Tensor:
    """MSE between the adapted student tap and the detached teacher tap."""
    if scale not in SCALES:
        raise LossInputError(f"unknown scale {scale!r}, expected one of {SCALES}")
    t = teacher_taps.get(scale).detach()
    s = adapter(student_taps.get(scale), size=t.shape[-2:])
    if s.shape != t.shape:
        raise LossInputError(
            f"feature_mse_loss: adapted student tap {tuple(s.shape)} does not match "
            f"teacher tap {tuple(t.shape)} at scale {scale!r}"
        )
    return F.mse_loss(s, t)


def _as_class_pairs(logits: torch.Tensor) -> torch.Tensor:
    """View single-logit maps as two-class rows (z, 0); pass 2-class through."""
    if logits.ndim >= 2 and logits.shape[1] == 2:
        return logits.movedim(1, -1).reshape(-1, 2)
    z = logits.reshape(-1, 1)
    return torch.cat([z, torch.zeros_like(z)], dim=1)


def pmd_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    temperature: float = 4.0,
) -> torch.Tensor:
    """Prediction-map distillation: temperature-softened KL times T^2.

    Single-logit maps are expanded to the two-class pair (z, 0) so the
    softmax recovers the sigmoid; inputs already carrying a 2-wide class
    dim are used as-is. Direction is KL(teacher || student); the teacher
    side is detached.
    """
    if temperature <= 0:
        raise LossInputError(f"temperature must be positive, got {temperature}")
    _check_same_shape(student_logits, teacher_logits, "pmd_loss")
    s = _as_class_pairs(student_logits) / temperature
    t = _as_class_pairs(teacher_logits).detach() / temperature
    log_p_s = F.log_softmax(s, dim=1)
    p_t = F.softmax(t, dim=1)
    kl = F.kl_div(log_p_s, p_t, reduction="batchmean")
    return kl * temperature * temperature


@dataclass
class LossWeights:
    """Weights of the student composite objective.

    Per-scale weights apply to whichever distillation loss is active at that
    scale; the prediction-map term enters unweighted when enabled.
    """

    w_seg: float = 1.0
    w_enc: float = 0.1
    w_bn: float = 0.1
    w_dec: float = 0.1

    def __post_init__(self):
        for name in ("w_seg", "w_enc", "w_bn", "w_dec"):
            if getattr(self, name) < 0:
                raise LossInputError(f"{name} must be non-negative, got {getattr(self, name)}")

    def scale_weight(self, scale: str) -> float:
        return {"encoder": self.w_enc, "bottleneck": self.w_bn, "decoder": self.w_dec}[scale]

    def to_dict(self) -> dict:
        return {"w_seg": self.w_seg, "w_enc": self.w_enc, "w_bn": self.w_bn, "w_dec": self.w_dec}


@dataclass
class LossBreakdown:
    """Per-component values plus the weighted total used for backward."""

    seg: torch.Tensor
    con_enc: torch.Tensor | None
    con_bn: torch.Tensor | None
    con_dec: torch.Tensor | None
    pmd: torch.Tensor | None
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        out = {}
        for name in ("seg", "con_enc", "con_bn", "con_dec", "pmd", "total"):
            v = getattr(self, name)
            out[name] = float(v.detach()) if v is not None else float("nan")
        return out


def student_total_loss(
    weights: LossWeights,
    seg: torch.Tensor,
    con_enc: torch.Tensor | None = None,
    con_bn: torch.Tensor | None = None,
    con_dec: torch.Tensor | None = None,
    pmd: torch.Tensor | None = None,
) -> LossBreakdown:
    """Combine components into the distillation objective.

    total = w_seg*seg + w_enc*con_enc + w_bn*con_bn + w_dec*con_dec + pmd.
    A component with a positive weight must be supplied; zero-weighted
    components still enter the graph as exact zeros, and a missing pmd term
    simply stays off.
    """
    parts = {"con_enc": (weights.w_enc, con_enc), "con_bn": (weights.w_bn, con_bn),
             "con_dec": (weights.w_dec, con_dec)}
    total = weights.w_seg * seg
    for name, (w, value) in parts.items():
        if value is None:
            if w > 0:
                raise LossInputError(f"{name} has weight {w} but no value was supplied")
            continue
        total = total + w * value
    if pmd is not None:
        total = total + pmd
    return LossBreakdown(seg=seg, con_enc=con_enc, con_bn=con_bn, con_dec=con_dec,
                         pmd=pmd, total=total)
