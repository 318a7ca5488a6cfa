"""Volume ingestion and 2D slice corpus construction.

CT volumes arrive as NIfTI-1 files (one image volume plus one label volume
per subject). They are cut along the axial axis into grayscale PNG slices,
rescaled so the brightest voxel of each volume maps to 255. Downstream
training consumes the resulting image/mask PNG pairs.
"""

from __future__ import annotations

import gzip
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

SCALES = ("encoder", "bottleneck", "decoder")

MASK_BINARIZE_THRESHOLD = 127  # pixel values strictly above this count as foreground


class NiftiError(ValueError):
    """Raised when a file cannot be parsed as NIfTI-1."""


class DataError(ValueError):
    """Raised for corpus-level problems (orphan files, bad names, empty sets)."""


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 reader/writer.
#
# Only the fields needed to recover the voxel grid are parsed: dim, datatype,
# vox_offset and the scl slope/intercept. Single-file .nii and .nii.gz are
# supported; both byte orders are handled.
# ---------------------------------------------------------------------------

_NIFTI_HDR_SIZE = 348
_NIFTI_MAGICS = (b"n+1\x00", b"ni1\x00")
_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _open_maybe_gz(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path: str | Path) -> np.ndarray:
    """Read a NIfTI-1 volume into a numpy array (x, y, z order).

    Raises NiftiError on truncated or malformed files. Slope/intercept
    scaling is applied when the header carries a non-identity transform.
    """
    path = Path(path)
    with _open_maybe_gz(path, "rb") as fh:
        hdr = fh.read(_NIFTI_HDR_SIZE)
        if len(hdr) < _NIFTI_HDR_SIZE:
            raise NiftiError(f"{path}: truncated header ({len(hdr)} bytes, need {_NIFTI_HDR_SIZE})")
        for order in ("<", ">"):
            (sizeof_hdr,) = struct.unpack_from(order + "i", hdr, 0)
            if sizeof_hdr == _NIFTI_HDR_SIZE:
                break
        else:
            raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        magic = hdr[344:348]
        if magic not in _NIFTI_MAGICS:
            raise NiftiError(f"{path}: bad magic {magic!r}, not a NIfTI-1 file")

        dim = struct.unpack_from(order + "8h", hdr, 40)
        ndim = dim[0]
        if not 1 <= ndim <= 7:
            raise NiftiError(f"{path}: invalid dim[0]={ndim}")
        shape = tuple(max(1, d) for d in dim[1 : 1 + ndim])
        (datatype,) = struct.unpack_from(order + "h", hdr, 70)
        if datatype not in _NIFTI_DTYPES:
            raise NiftiError(f"{path}: unsupported datatype code {datatype}")
        (vox_offset,) = struct.unpack_from(order + "f", hdr, 108)
        scl_slope, scl_inter = struct.unpack_from(order + "2f", hdr, 112)

        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order)
        count = int(np.prod(shape))
        fh.seek(int(vox_offset) if vox_offset >= _NIFTI_HDR_SIZE else _NIFTI_HDR_SIZE + 4)
        raw = fh.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise NiftiError(f"{path}: voxel data truncated")

    data = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    return data


def write_nifti(path: str | Path, voxels: np.ndarray) -> Path:
    """Write a volume as a single-file NIfTI-1 (.nii or .nii.gz)."""
    path = Path(path)
    voxels = np.asarray(voxels)
    if voxels.dtype not in _DTYPE_CODES:
        voxels = voxels.astype(np.float32)
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    dim = [voxels.ndim] + list(voxels.shape) + [1] * (7 - voxels.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _DTYPE_CODES[voxels.dtype])
    struct.pack_into("<h", hdr, 72, voxels.dtype.itemsize * 8)
    pixdim = [1.0] * 8
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[344:348] = _NIFTI_MAGICS[0]
    with _open_maybe_gz(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # extension flag
        fh.write(np.asfortranarray(voxels).tobytes(order="F"))
    return path


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass
class Volume:
    """A 3D voxel grid with its subject identity."""

    subject_id: str
    voxels: np.ndarray  # (H, W, D)

    @property
    def num_slices(self) -> int:
        return int(self.voxels.shape[2])


@dataclass
class SliceSample:
    """One 2D slice, optionally paired with its binary mask.

    image is uint8 (H, W); mask, when present, is uint8 (H, W) in {0, 1}.
    """

    subject_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray | None = None

    @property
    def key(self) -> str:
        return f"{self.subject_id}_{self.slice_index}"


@dataclass
class DatasetSpec:
    """Where a PNG slice corpus lives and how to subset it."""

    source_dir: str | Path
    fraction: float = 1.0
    seed: int = 0
    image_size: tuple[int, int] | None = None  # (H, W); None keeps native size


# ---------------------------------------------------------------------------
# Volume -> slices
# ---------------------------------------------------------------------------


def load_volume(path: str | Path, subject_id: str | None = None) -> Volume | None:
    """Load one NIfTI volume.

    A missing file is tolerated (warning + None) so a sweep over subjects can
    skip gaps; an unparseable file is a hard error.
    """
    path = Path(path)
    if not path.exists():
        logger.warning("volume %s missing, skipping", path)
        return None
    voxels = read_nifti(path)
    voxels = np.squeeze(voxels)
    if voxels.ndim == 2:
        voxels = voxels[:, :, None]
    if voxels.ndim != 3:
        raise NiftiError(f"{path}: expected a 3D volume, got shape {voxels.shape}")
    if subject_id is None:
        subject_id = path.name.split(".")[0]
    return Volume(subject_id=subject_id, voxels=voxels)


def _round_half_up(x: np.ndarray | float) -> np.ndarray | float:
    return np.floor(x + 0.5)


def volume_to_slices(volume: Volume) -> list[SliceSample]:
    """Cut a volume into axial uint8 slices.

    Each voxel is scaled by 255 / max(volume) with round-half-up, then
    clipped to [0, 255]; the brightest voxel therefore maps to exactly 255.
    An all-zero volume yields no slices (with a warning) rather than a
    divide-by-zero.
    """
    vox = volume.voxels.astype(np.float64)
    max_val = float(vox.max())
    if max_val <= 0.0:
        logger.warning("volume %s has no positive voxels, emitting no slices", volume.subject_id)
        return []
    scaled = np.clip(_round_half_up(vox * (255.0 / max_val)), 0, 255).astype(np.uint8)
    return [
        SliceSample(subject_id=volume.subject_id, slice_index=i, image=scaled[:, :, i])
        for i in range(scaled.shape[2])
    ]


def slice_filename(kind: str, subject_id: str, slice_index: int) -> str:
    return f"{kind}_{subject_id}_{slice_index}.png"


_SLICE_NAME_RE = re.compile(r"^(image|mask)_(.+)_(\d+)\.png$")


def parse_slice_filename(name: str) -> tuple[str, str, int]:
    """Split 'image_<subject>_<i>.png' into (kind, subject, index)."""
    m = _SLICE_NAME_RE.match(name)
    if m is None:
        raise DataError(f"unrecognized slice filename: {name!r}")
    return m.group(1), m.group(2), int(m.group(3))


def write_slices(samples: list[SliceSample], out_dir: str | Path, kind: str = "image") -> list[Path]:
    """Write slices as grayscale PNGs named <kind>_<subject>_<i>.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in samples:
        arr = s.image if kind == "image" else (s.mask * 255).astype(np.uint8)
        p = out_dir / slice_filename(kind, s.subject_id, s.slice_index)
        Image.fromarray(arr, mode="L").save(p)
        paths.append(p)
    return paths


def export_volume_pair(
    image_path: str | Path,
    mask_path: str | Path | None,
    out_dir: str | Path,
    subject_id: str | None = None,
) -> list[Path]:
    """Slice one image volume (and its label volume, if given) to PNGs.

    The mask volume reuses the same scaling path; binary {0,1} labels hit
    max=1 and land on {0,255} pixels. Returns the written image paths.
    """
    vol = load_volume(image_path, subject_id=subject_id)
    if vol is None:
        return []
    samples = volume_to_slices(vol)
    written = write_slices(samples, out_dir, kind="image")
    if mask_path is not None:
        mvol = load_volume(mask_path, subject_id=vol.subject_id)
        if mvol is not None:
            if mvol.voxels.shape != vol.voxels.shape:
                raise DataError(
                    f"mask shape {mvol.voxels.shape} does not match image shape "
                    f"{vol.voxels.shape} for subject {vol.subject_id}"
                )
            # label pixels arrive through the same scaling path, so {0,1}
            # voxels land on {0,255}; an all-zero label volume yields no
            # slices at all and must still pair every image with a mask
            by_index = {m.slice_index: m.image for m in volume_to_slices(mvol)}
            for s in samples:
                pixels = by_index.get(s.slice_index)
                s.mask = (
                    (pixels > MASK_BINARIZE_THRESHOLD).astype(np.uint8)
                    if pixels is not None
                    else np.zeros_like(s.image, dtype=np.uint8)
                )
            write_slices(samples, out_dir, kind="mask")
    return written


# ---------------------------------------------------------------------------
# PNG corpus -> dataset
# ---------------------------------------------------------------------------


class SliceDataset(torch.utils.data.Dataset):
    """In-memory list of SliceSamples exposed as (image, mask) tensor pairs.

    Images come out as float32 (3, H, W) in [0, 1] (grayscale replicated to
    three channels); masks as float32 (1, H, W) in {0, 1}.
    """

    def __init__(self, samples: list[SliceSample], image_size: tuple[int, int] | None = None):
        self.samples = list(samples)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def subjects(self) -> list[str]:
        return sorted({s.subject_id for s in self.samples})

    def _resized(self, sample: SliceSample) -> tuple[np.ndarray, np.ndarray | None]:
        img, mask = sample.image, sample.mask
        if self.image_size is not None and img.shape != self.image_size:
            h, w = self.image_size
            img = np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))
            if mask is not None:
                mask = np.asarray(
                    Image.fromarray(mask * 255).resize((w, h), Image.NEAREST)
                )
                mask = (mask > MASK_BINARIZE_THRESHOLD).astype(np.uint8)
        return img, mask

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, torch.Tensor | None]:
        img, mask = self._resized(self.samples[idx])
        x = torch.from_numpy(img.astype(np.float32) / 255.0)
        x = x.unsqueeze(0).repeat(3, 1, 1)
        if mask is None:
            return x, None
        y = torch.from_numpy(mask.astype(np.float32)).unsqueeze(0)
        return x, y

    def subset(self, subject_ids: set[str]) -> "SliceDataset":
        kept = [s for s in self.samples if s.subject_id in subject_ids]
        return SliceDataset(kept, image_size=self.image_size)


def select_subjects(subjects: list[str], fraction: float, seed: int) -> list[str]:
    """Pick round-half-up(fraction * n) whole subjects, at least one."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    ordered = sorted(subjects)
    if fraction == 1.0:
        return ordered
    k = max(1, int(_round_half_up(fraction * len(ordered))))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    return sorted(ordered[i] for i in perm[:k])


def build_dataset(spec: DatasetSpec) -> SliceDataset:
    """Assemble a dataset from a directory of image_/mask_ PNG pairs.

    Every image must have its mask partner (orphans are an error naming the
    file). Masks are binarized at >127 on read. Subject-level subsampling is
    applied per spec.fraction with spec.seed.
    """
    src = Path(spec.source_dir)
    if not src.is_dir():
        raise DataError(f"dataset directory not found: {src}")
    images: dict[str, Path] = {}
    masks: dict[str, Path] = {}
    for p in sorted(src.iterdir()):
        if p.suffix != ".png":
            continue
        kind, subject, idx = parse_slice_filename(p.name)
        key = f"{subject}_{idx}"
        (images if kind == "image" else masks)[key] = p
    if not images:
        raise DataError(f"no image_*.png slices found in {src}")
    orphan_imgs = sorted(set(images) - set(masks))
    if orphan_imgs:
        raise DataError(f"image without mask: {images[orphan_imgs[0]].name}")
    orphan_masks = sorted(set(masks) - set(images))
    if orphan_masks:
        raise DataError(f"mask without image: {masks[orphan_masks[0]].name}")

    subjects = sorted({parse_slice_filename(p.name)[1] for p in images.values()})
    keep = set(select_subjects(subjects, spec.fraction, spec.seed))

    samples = []
    for key in sorted(images, key=lambda k: (parse_slice_filename(images[k].name)[1:])):
        _, subject, idx = parse_slice_filename(images[key].name)
        if subject not in keep:
            continue
        img = np.asarray(Image.open(images[key]).convert("L"))
        mask = np.asarray(Image.open(masks[key]).convert("L"))
        if img.shape != mask.shape:
            raise DataError(f"slice {key}: image {img.shape} vs mask {mask.shape}")
        samples.append(
            SliceSample(
                subject_id=subject,
                slice_index=idx,
                image=img,
                mask=(mask > MASK_BINARIZE_THRESHOLD).astype(np.uint8),
            )
        )
    size = tuple(spec.image_size) if spec.image_size is not None else None
    return SliceDataset(samples, image_size=size)


def subsample_by_subject(dataset: SliceDataset, fraction: float, seed: int) -> SliceDataset:
    """Keep a seeded fraction of whole subjects (never partial subjects)."""
    keep = set(select_subjects(dataset.subjects, fraction, seed))
    return dataset.subset(keep)


def split_by_subject(
    dataset: SliceDataset, val_fraction: float = 0.1, seed: int = 0
) -> tuple[SliceDataset, SliceDataset]:
    """Split into train/val sets along subject boundaries.

    At least one subject lands on each side when two or more exist.
    """
    subjects = dataset.subjects
    if len(subjects) < 2:
        raise DataError("need at least two subjects to split train/val")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(subjects))
    n_val = min(len(subjects) - 1, max(1, int(_round_half_up(val_fraction * len(subjects)))))
    val_ids = {subjects[i] for i in perm[:n_val]}
    train_ids = set(subjects) - val_ids
    return dataset.subset(train_ids), dataset.subset(val_ids)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def make_synthetic_dataset(
    n_samples: int, image_size: int = 64, seed: int = 0
) -> SliceDataset:
    """Generate bright-rectangle-on-noise slices with exact masks.

    Deterministic for a given (n_samples, image_size, seed). Samples are
    grouped ten to a subject so subject-level ops stay meaningful. The
    rectangle (brightness 180..255) always fits inside the frame over dark
    noise (0..40); the mask is the exact rectangle footprint.
    """
    if image_size < 4:
        raise DataError(f"image_size must be at least 4, got {image_size}")
    if n_samples < 1:
        raise DataError(f"n_samples must be positive, got {n_samples}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        img = rng.integers(0, 41, size=(image_size, image_size), dtype=np.int64)
        h = int(rng.integers(image_size // 4, image_size // 2 + 1))
        w = int(rng.integers(image_size // 4, image_size // 2 + 1))
        top = int(rng.integers(0, image_size - h + 1))
        left = int(rng.integers(0, image_size - w + 1))
        brightness = int(rng.integers(180, 256))
        img[top : top + h, left : left + w] = brightness
        mask = np.zeros((image_size, image_size), dtype=np.uint8)
        mask[top : top + h, left : left + w] = 1
        samples.append(
            SliceSample(
                subject_id=f"synth{i // 10:03d}",
                slice_index=i % 10,
                image=img.astype(np.uint8),
                mask=mask,
            )
        )
    return SliceDataset(samples)
