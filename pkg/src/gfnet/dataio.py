"""Datasets, the glance resize, patch cropping and train-time augmentation.

Binary format (little-endian)::

    "GFDS" | version u32 | N u32 | C u32 | H u32 | W u32 | num_classes u32
    N*C*H*W uint8 pixels (row-major N, C, H, W)
    N labels, uint8 (or uint16 when num_classes > 256)

Each file has a sidecar ``<file>.manifest.json`` holding provenance and the
per-channel normalization statistics of the training split.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigurationError, DatasetError, LabelRangeError, TruncatedPayloadError

MAGIC = b"GFDS"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass(frozen=True)
class PatchSpec:
    patch_h: int
    patch_w: int

    def __post_init__(self):
        if self.patch_h != self.patch_w:
            raise ConfigurationError("patches must be square (patch_h == patch_w)")
        if self.patch_h <= 0:
            raise ConfigurationError("patch size must be positive")

    def validate_for(self, height: int, width: int) -> None:
        if self.patch_h > height or self.patch_w > width:
            raise ConfigurationError(f"patch {self.patch_h}x{self.patch_w} larger than image {height}x{width}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DatasetError("images must be a uint8 array of shape (N, C, H, W)")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("labels must be a vector with one entry per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def normalization(self) -> tuple[np.ndarray, np.ndarray]:
        """Train-split (mean, std) per channel in [0, 1] pixel units."""
        stats = self.manifest.get("normalization")
        if stats is None:
            if self.split != "train":
                raise DatasetError("non-train split without recorded train normalization stats")
            return channel_stats(self.images)
        return np.asarray(stats["mean"], dtype=np.float32), np.asarray(stats["std"], dtype=np.float32)

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.split, dict(self.manifest))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


# -- binary I/O -----------------------------------------------------------------

def save_dataset(dataset: Dataset, path, manifest: dict | None = None) -> Path:
    path = Path(path)
    n, c, h, w = dataset.images.shape
    label_dtype = "<u2" if dataset.num_classes > 256 else "u1"
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.images).tobytes())
        fh.write(dataset.labels.astype(label_dtype).tobytes())
    record = dict(dataset.manifest)
    record.update(manifest or {})
    record.setdefault("split", dataset.split)
    record.update({"n": n, "shape": [c, h, w], "num_classes": dataset.num_classes})
    Path(str(path) + ".manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path, format: str = "gfds") -> Dataset:
    """Read a GFDS file and its manifest, validating every section."""
    if format != "gfds":
        raise ConfigurationError(f"unsupported dataset format {format!r}")
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"truncated payload: header needs {_HEADER.size} bytes, file has {len(raw)}")
    magic, version, n, c, h, w, num_classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r} (expected {MAGIC!r})")
    if version != VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    pix = n * c * h * w
    label_bytes = 2 if num_classes > 256 else 1
    offset = _HEADER.size
    if len(raw) < offset + pix:
        raise TruncatedPayloadError(
            f"truncated payload at byte offset {len(raw)}: pixel block needs bytes {offset}..{offset + pix}"
        )
    images = np.frombuffer(raw, dtype=np.uint8, count=pix, offset=offset).reshape(n, c, h, w).copy()
    offset += pix
    if len(raw) < offset + n * label_bytes:
        raise TruncatedPayloadError(
            f"truncated payload at byte offset {len(raw)}: label block needs bytes {offset}..{offset + n * label_bytes}"
        )
    labels = np.frombuffer(raw, dtype="<u2" if label_bytes == 2 else np.uint8, count=n, offset=offset)
    labels = labels.astype(np.int64)
    if n and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise LabelRangeError(f"label {labels[bad]} of sample {bad} outside [0, {num_classes})")
    manifest_path = Path(str(path) + ".manifest.json")
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    return Dataset(images, labels, int(num_classes), manifest.get("split", "train"), manifest)


# -- glance and focus inputs ----------------------------------------------------

def resize_glance(image: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Area-averaging downsample of a (..., C, H, W) image to the patch size.

    Integer ratios use exact block means; other ratios use fractional-overlap
    area weights. Upsampling is rejected.
    """
    h, w = image.shape[-2:]
    if spec.patch_h > h or spec.patch_w > w:
        raise ConfigurationError(f"glance resize would upsample {h}x{w} -> {spec.patch_h}x{spec.patch_w}")
    x = np.asarray(image, dtype=np.float32)
    if h % spec.patch_h == 0 and w % spec.patch_w == 0:
        fh, fw = h // spec.patch_h, w // spec.patch_w
        if fh == 1 and fw == 1:
            return x.copy()
        blocks = x.reshape(*x.shape[:-2], spec.patch_h, fh, spec.patch_w, fw)
        return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(np.float32)
    rows = _area_weights(h, spec.patch_h)
    cols = _area_weights(w, spec.patch_w)
    out = np.einsum("ph,...hw,qw->...pq", rows, x.astype(np.float64), cols)
    return out.astype(np.float32)


def _area_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) matrix: fraction of each source pixel covered by each output cell, row-normalized."""
    scale = src / dst
    weights = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), src)):
            weights[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    return weights / weights.sum(axis=1, keepdims=True)


def patch_window(center, image_hw: tuple, spec: PatchSpec) -> tuple[int, int]:
    """Top-left (row, col) of the patch centred at normalized ``center`` = (cy, cx).

    The centre is clamped so the window lies inside the image; the corner is
    round(c * H) - H'/2 clipped to [0, H - H'].
    """
    h, w = image_hw
    cy = float(np.clip(center[0], spec.patch_h / (2 * h), 1 - spec.patch_h / (2 * h)))
    cx = float(np.clip(center[1], spec.patch_w / (2 * w), 1 - spec.patch_w / (2 * w)))
    top = int(np.clip(int(np.floor(cy * h + 0.5)) - spec.patch_h // 2, 0, h - spec.patch_h))
    left = int(np.clip(int(np.floor(cx * w + 0.5)) - spec.patch_w // 2, 0, w - spec.patch_w))
    return top, left


def crop_patch(image: np.ndarray, center, spec: PatchSpec) -> np.ndarray:
    """Copy the H'xW' window centred (after clamping) at ``center`` = (cy, cx) in [0, 1]^2."""
    h, w = image.shape[-2:]
    spec.validate_for(h, w)
    top, left = patch_window(center, (h, w), spec)
    return image[..., top:top + spec.patch_h, left:left + spec.patch_w].copy()


def crop_batch(images: np.ndarray, centers: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """``crop_patch`` for a (N, C, H, W) batch with one (cy, cx) centre per sample."""
    n, c = images.shape[:2]
    out = np.empty((n, c, spec.patch_h, spec.patch_w), dtype=images.dtype)
    hw = images.shape[-2:]
    for i in range(n):
        top, left = patch_window(centers[i], hw, spec)
        out[i] = images[i, :, top:top + spec.patch_h, left:left + spec.patch_w]
    return out


# -- augmentation ---------------------------------------------------------------

def flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def shift(image: np.ndarray, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad`` pixels and crop back at offset (pad + dy, pad + dx)."""
    h, w = image.shape[-2:]
    widths = [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(image, widths)
    return padded[..., pad + dy:pad + dy + h, pad + dx:pad + dx + w].copy()


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p = 0.5) followed by a random shift-crop with zero padding."""
    if rng.random() < 0.5:
        image = flip(image)
    dy, dx = rng.integers(-pad, pad + 1, size=2)
    return shift(image, int(dy), int(dx), pad)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    return np.stack([augment(img, rng, pad) for img in images])


# -- batching -------------------------------------------------------------------

def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """uint8 or [0, 255] float pixels -> standardized float32 using the given stats."""
    x = np.asarray(images, dtype=np.float32) / np.float32(255.0)
    shape = (1,) * (x.ndim - 3) + (-1, 1, 1)
    return ((x - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)
