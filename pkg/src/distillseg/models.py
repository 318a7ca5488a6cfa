"""Network zoo: multi-task teacher, compact students, projection heads.

All nets are fully convolutional on 3-channel inputs and expose the same
forward contract: segmentation logits at input resolution, an optional
reconstruction (teacher only), and feature taps at three scales (encoder,
bottleneck, decoder) used for distillation.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SCALES

ROLE_TEACHER = "teacher_mt_unet"
ROLE_STUDENT_S1 = "student_s1"
ROLE_STUDENT_S2 = "student_s2"
ROLES = (ROLE_TEACHER, ROLE_STUDENT_S1, ROLE_STUDENT_S2)

_ROLE_DEFAULT_BASE = {ROLE_TEACHER: 64, ROLE_STUDENT_S1: 16, ROLE_STUDENT_S2: 16}

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Raised for invalid model configs or misused forward contracts."""


class CheckpointError(ValueError):
    """Raised when a checkpoint file is unreadable or incompatible."""


@dataclass
class ModelConfig:
    """Declarative description of a network, round-trippable via dicts."""

    role: str
    in_channels: int = 3
    out_channels: int = 1
    base_channels: int | None = None
    with_recon_head: bool | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ModelError(f"unknown role {self.role!r}, expected one of {ROLES}")
        if self.base_channels is None:
            self.base_channels = _ROLE_DEFAULT_BASE[self.role]
        if self.base_channels < 1:
            raise ModelError(f"base_channels must be positive, got {self.base_channels}")
        if self.with_recon_head is None:
            self.with_recon_head = self.role == ROLE_TEACHER
        if self.with_recon_head and self.role != ROLE_TEACHER:
            raise ModelError("only the teacher carries a reconstruction head")

    @property
    def downsample_factor(self) -> int:
        return 16 if self.role == ROLE_TEACHER else 4

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_channels": self.base_channels,
            "with_recon_head": self.with_recon_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FeatureTaps:
    """Intermediate activations exposed for distillation, one per scale."""

    encoder: torch.Tensor
    bottleneck: torch.Tensor
    decoder: torch.Tensor

    def get(self, scale: str) -> torch.Tensor:
        if scale not in SCALES:
            raise ModelError(f"unknown tap scale {scale!r}, expected one of {SCALES}")
        return getattr(self, scale)


@dataclass
class ForwardOutput:
    seg_logits: torch.Tensor
    recon: torch.Tensor | None
    taps: FeatureTaps


class _ConvBlock(nn.Module):
    """Conv-BN-ReLU twice."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class _SingleConv(nn.Module):
    """Conv-BN-ReLU once; the student building block."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class _UpBlock(nn.Module):
    """Transposed-conv upsample, concat the skip, then a double conv."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2)
        self.conv = _ConvBlock(cout * 2, cout)

    def forward(self, x, skip):
        x = self.up(x)
        return self.conv(torch.cat([skip, x], dim=1))


class _Decoder(nn.Module):
    """Four up blocks walking the teacher ladder back to base width."""

    def __init__(self, base: int):
        super().__init__()
        self.up4 = _UpBlock(base * 16, base * 8)
        self.up3 = _UpBlock(base * 8, base * 4)
        self.up2 = _UpBlock(base * 4, base * 2)
        self.up1 = _UpBlock(base * 2, base)

    def forward(self, bneck, skips):
        e1, e2, e3, e4 = skips
        x = self.up4(bneck, e4)
        x = self.up3(x, e3)
        x = self.up2(x, e2)
        return self.up1(x, e1)


class MultiTaskUNet(nn.Module):
    """U-Net encoder shared by a segmentation and a reconstruction decoder.

    Channel ladder base..16*base with a double-conv block per stage; both
    decoders get skip connections from the shared encoder. Tap points:
    encoder = deepest encoder block output (pre-pool), bottleneck = bottleneck
    block output, decoder = last segmentation-decoder block output.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.enc1 = _ConvBlock(config.in_channels, b)
        self.enc2 = _ConvBlock(b, b * 2)
        self.enc3 = _ConvBlock(b * 2, b * 4)
        self.enc4 = _ConvBlock(b * 4, b * 8)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _ConvBlock(b * 8, b * 16)
        self.seg_decoder = _Decoder(b)
        self.seg_head = nn.Conv2d(b, config.out_channels, 1)
        if config.with_recon_head:
            self.rec_decoder = _Decoder(b)
            self.rec_head = nn.Conv2d(b, config.in_channels, 1)
        else:
            self.rec_decoder = None
            self.rec_head = None

    def tap_channels(self) -> dict[str, int]:
        b = self.config.base_channels
        return {"encoder": b * 8, "bottleneck": b * 16, "decoder": b}

    def forward(self, x) -> ForwardOutput:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        bneck = self.bottleneck(self.pool(e4))
        skips = (e1, e2, e3, e4)
        dec = self.seg_decoder(bneck, skips)
        seg = self.seg_head(dec)
        recon = None
        if self.rec_decoder is not None:
            recon = torch.sigmoid(self.rec_head(self.rec_decoder(bneck, skips)))
        return ForwardOutput(seg, recon, FeatureTaps(e4, bneck, dec))


class CompactStudentNet(nn.Module):
    """Two-level plain encoder-decoder, one conv per block, no skips.

    The smallest student: base..4*base ladder, transposed-conv upsampling.
    Taps: encoder = second encoder block output (half resolution, pre-pool),
    bottleneck = bottleneck block output (quarter resolution), decoder = last
    decoder block output (input resolution).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.enc1 = _SingleConv(config.in_channels, b)
        self.enc2 = _SingleConv(b, b * 2)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _SingleConv(b * 2, b * 4)
        self.up1 = nn.ConvTranspose2d(b * 4, b * 4, 2, stride=2)
        self.dec1 = _SingleConv(b * 4, b)
        self.up2 = nn.ConvTranspose2d(b, b, 2, stride=2)
        self.dec2 = _SingleConv(b, b)
        self.seg_head = nn.Conv2d(b, config.out_channels, 1)

    def tap_channels(self) -> dict[str, int]:
        b = self.config.base_channels
        return {"encoder": b * 2, "bottleneck": b * 4, "decoder": b}

    def forward(self, x) -> ForwardOutput:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        bneck = self.bottleneck(self.pool(e2))
        d1 = self.dec1(self.up1(bneck))
        d2 = self.dec2(self.up2(d1))
        seg = self.seg_head(d2)
        return ForwardOutput(seg, None, FeatureTaps(e2, bneck, d2))


class SmallUNet(nn.Module):
    """Two-level skip U-Net at base width 16; the mid-size student."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        self.enc1 = _ConvBlock(config.in_channels, b)
        self.enc2 = _ConvBlock(b, b * 2)
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _ConvBlock(b * 2, b * 4)
        self.up2 = _UpBlock(b * 4, b * 2)
        self.up1 = _UpBlock(b * 2, b)
        self.seg_head = nn.Conv2d(b, config.out_channels, 1)

    def tap_channels(self) -> dict[str, int]:
        b = self.config.base_channels
        return {"encoder": b * 2, "bottleneck": b * 4, "decoder": b}

    def forward(self, x) -> ForwardOutput:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        bneck = self.bottleneck(self.pool(e2))
        d = self.up2(bneck, e2)
        d = self.up1(d, e1)
        seg = self.seg_head(d)
        return ForwardOutput(seg, None, FeatureTaps(e2, bneck, d))


_ROLE_CLASSES = {
    ROLE_TEACHER: MultiTaskUNet,
    ROLE_STUDENT_S1: CompactStudentNet,
    ROLE_STUDENT_S2: SmallUNet,
}


def build_model(config: ModelConfig) -> nn.Module:
    return _ROLE_CLASSES[config.role](config)


def forward_with_taps(model: nn.Module, batch: torch.Tensor) -> ForwardOutput:
    """Run a forward pass after validating the batch shape.

    The batch must be (B, C, H, W) with H and W divisible by the model's
    downsample factor, so every pool/upsample pair round-trips exactly.
    """
    cfg: ModelConfig = model.config
    if batch.ndim != 4:
        raise ModelError(f"expected a 4D batch (B, C, H, W), got shape {tuple(batch.shape)}")
    if batch.shape[1] != cfg.in_channels:
        raise ModelError(f"expected {cfg.in_channels} input channels, got {batch.shape[1]}")
    f = cfg.downsample_factor
    if batch.shape[2] % f or batch.shape[3] % f:
        raise ModelError(
            f"spatial dims {tuple(batch.shape[2:])} must be multiples of {f} for role {cfg.role}"
        )
    return model(batch)


def count_parameters(model: nn.Module) -> int:
    """Total learnable-parameter count, independent of freeze state."""
    return sum(p.numel() for p in model.parameters())


def freeze(model: nn.Module) -> nn.Module:
    """Disable gradients and switch to eval mode. Safe to call twice."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over every state tensor (params and buffers), order-stable."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class ProjectionHead(nn.Module):
    """Map a (B, C, H, W) tap to a unit-norm (B, D) embedding.

    Global average pool, then linear C->2D, ReLU, linear 2D->D, followed by
    L2 normalization (norm clamped at 1e-12).
    """

    def __init__(self, in_channels: int, embed_dim: int = 128):
        super().__init__()
        self.in_channels = in_channels
        self.embed_dim = embed_dim
        self.fc1 = nn.Linear(in_channels, embed_dim * 2)
        self.fc2 = nn.Linear(embed_dim * 2, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = x.mean(dim=(2, 3))
        z = self.fc2(F.relu(self.fc1(z)))
        return F.normalize(z, dim=1, eps=1e-12)


def project(projector: ProjectionHead, tap: torch.Tensor) -> torch.Tensor:
    """Apply a projection head to a tap, checking the channel contract."""
    if tap.ndim != 4:
        raise ModelError(f"tap must be 4D (B, C, H, W), got shape {tuple(tap.shape)}")
    if tap.shape[1] != projector.in_channels:
        raise ModelError(
            f"tap has {tap.shape[1]} channels but projector expects {projector.in_channels}"
        )
    return projector(tap)


class FeatureAdapter(nn.Module):
    """1x1 conv matching student tap channels (and spatial size) to a teacher tap."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
        x = self.conv(x)
        if size is not None and tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return x


# ---------------------------------------------------------------------------
# Checkpoints: flat .npz of named arrays plus a JSON manifest. No pickling.
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: nn.Module,
    path: str | Path,
    *,
    step: int = 0,
    seed: int = 0,
    extra: dict | None = None,
    aux: nn.Module | None = None,
) -> Path:
    """Persist model state (and optional training-time aux modules) to .npz.

    Aux weights (projection heads, adapters) are stored under aux/ keys and
    ignored by inference loads.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    state_names = []
    for name, tensor in model.state_dict().items():
        arrays[f"state/{name}"] = tensor.detach().cpu().numpy()
        state_names.append(name)
    aux_names = []
    if aux is not None:
        for name, tensor in aux.state_dict().items():
            arrays[f"aux/{name}"] = tensor.detach().cpu().numpy()
            aux_names.append(name)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "seed": int(seed),
        "extra": extra or {},
        "arrays": state_names,
        "aux": aux_names,
    }
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest)), **arrays)
    return path


def read_manifest(path: str | Path) -> dict:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            return json.loads(str(z["manifest"][()]))
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e


def load_checkpoint(
    path: str | Path, config: ModelConfig | None = None
) -> tuple[nn.Module, dict]:
    """Rebuild a model from a checkpoint.

    When a config is passed it must be array-compatible with the stored
    state; the first offending array is named in the error. Returns the
    model (train mode, gradients enabled) and the manifest.
    """
    path = Path(path)
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with z:
        try:
            manifest = json.loads(str(z["manifest"][()]))
        except (KeyError, json.JSONDecodeError) as e:
            raise CheckpointError(f"checkpoint {path} has no valid manifest") from e
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {manifest.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        if config is None:
            config = ModelConfig.from_dict(manifest["config"])
        model = build_model(config)
        stored = {name: z[f"state/{name}"] for name in manifest["arrays"]}

    state = model.state_dict()
    for name, tensor in state.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint {path} is missing array 'state/{name}'")
        arr = stored[name]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"array 'state/{name}': checkpoint shape {tuple(arr.shape)} "
                f"does not match model shape {tuple(tensor.shape)}"
            )
    for name in stored:
        if name not in state:
            raise CheckpointError(f"checkpoint {path} has unexpected array 'state/{name}'")
    model.load_state_dict(
        {name: torch.from_numpy(arr.copy()) for name, arr in stored.items()}
    )
    return model, manifest


def load_checkpoint_aux(path: str | Path) -> dict[str, torch.Tensor]:
    """Fetch the aux/ tensors (projectors, adapters) from a checkpoint."""
    manifest = read_manifest(path)
    with np.load(Path(path), allow_pickle=False) as z:
        return {name: torch.from_numpy(z[f"aux/{name}"].copy()) for name in manifest["aux"]}
