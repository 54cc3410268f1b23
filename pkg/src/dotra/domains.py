"""MNIST ingestion and the parametric transformations that generate domain sequences.

Images are float32 arrays of shape (N, 1, 32, 32) with background -1 and ink +1.
Every transformation is batched and pure: it never mutates its input.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
BACKGROUND = -1.0

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

OPERATIONS = ("rotate", "zoom", "shift", "split")

# Magnitudes used for the benchmark sequences.
BENCHMARK_MAGNITUDES = {"rotate": 45.0, "zoom": 1.33, "shift": 6, "split": 6}


class DataFormatError(Exception):
    """Raised when an IDX file is missing, truncated or carries the wrong magic number."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class UnlabeledDataset:
    images: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"expected images of shape (N, 1, 32, 32), got {images.shape}")
        object.__setattr__(self, "images", _frozen(images))

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class LabeledDataset(UnlabeledDataset):
    labels: np.ndarray = None

    def __post_init__(self):
        super().__post_init__()
        if self.labels is None:
            raise ValueError("labels are required")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (len(self.images),):
            raise ValueError(f"{len(self.images)} images but labels of shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > 9):
            raise ValueError("labels must lie in [0, 9]")
        object.__setattr__(self, "labels", _frozen(labels))

    def unlabeled(self) -> UnlabeledDataset:
        """Drop the labels. The returned object holds no reference to them."""
        return UnlabeledDataset(self.images)

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx])

    def with_images(self, images: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(images, self.labels)


@dataclass(frozen=True)
class DomainOp:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in OPERATIONS:
            raise ValueError(f"unknown operation {self.kind!r}; valid operations: {', '.join(OPERATIONS)}")

    @classmethod
    def benchmark(cls, kind: str) -> "DomainOp":
        if kind not in OPERATIONS:
            raise ValueError(f"unknown operation {kind!r}; valid operations: {', '.join(OPERATIONS)}")
        return cls(kind, BENCHMARK_MAGNITUDES[kind])

    def __call__(self, images: np.ndarray) -> np.ndarray:
        if self.kind == "rotate":
            return rotate(images, self.magnitude)
        if self.kind == "zoom":
            return zoom_center(images, self.magnitude)
        if self.kind == "shift":
            return shift_vertical(images, int(self.magnitude))
        return split_mid(images, int(self.magnitude))


# ---------------------------------------------------------------- IDX parsing

def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    try:
        if not path.exists() and path.with_name(path.name + ".gz").exists():
            raw = gzip.decompress(path.with_name(path.name + ".gz").read_bytes())
        else:
            raw = path.read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read MNIST file {path}: {e.strerror}") from e
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise DataFormatError(f"{path}: magic number {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if data.size != int(np.prod(dims)):
        raise DataFormatError(f"{path}: expected {int(np.prod(dims))} bytes of data, found {data.size}")
    return data.reshape(dims)


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get("DOTRA_DATA_DIR")
    if not data_dir:
        raise DataFormatError("no MNIST directory given (use --data-dir or set DOTRA_DATA_DIR)")
    return Path(data_dir)


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """Map 28x28 uint8 MNIST digits to 32x32 images in [-1, 1].

    Resizing happens on the raw intensity scale, the affine range map comes after.
    """
    resized = resize_bilinear(raw.astype(np.float32)[:, None], IMAGE_SIZE, IMAGE_SIZE)
    return np.clip(resized / 127.5 - 1.0, -1.0, 1.0).astype(np.float32)


def load_mnist(split: str, data_dir=None) -> LabeledDataset:
    if split not in MNIST_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = resolve_data_dir(data_dir)
    image_file, label_file = MNIST_FILES[split]
    raw = _read_idx(root / image_file, IMAGE_MAGIC, 3)
    labels = _read_idx(root / label_file, LABEL_MAGIC, 1)
    if len(raw) != len(labels):
        raise DataFormatError(f"{root}: {len(raw)} images but {len(labels)} labels")
    return LabeledDataset(to_unit_range(raw), labels.astype(np.int64))


# ------------------------------------------------------------- resampling core

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers; edges clamp
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - w)
    np.add.at(m, (rows, hi), w)
    return m


def resize_bilinear(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize of an (N, C, H, W) batch."""
    a = _interp_matrix(images.shape[-2], height)
    b = _interp_matrix(images.shape[-1], width)
    out = np.einsum("ih,nchw,jw->ncij", a, images.astype(np.float64), b, optimize=True)
    return out.astype(np.float32)


def _sample_bilinear(images: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: float) -> np.ndarray:
    """Sample every image of the batch at fractional (rows, cols); outside samples read `fill`."""
    n, c, h, w = images.shape
    padded = np.full((n, c, h + 2, w + 2), fill, dtype=np.float64)
    padded[:, :, 1:-1, 1:-1] = images
    # shift by one for the padding ring, clamp anything further out onto the ring
    r = np.clip(rows + 1, 0, h + 1)
    q = np.clip(cols + 1, 0, w + 1)
    r0 = np.minimum(np.floor(r).astype(int), h)
    q0 = np.minimum(np.floor(q).astype(int), w)
    dr = r - r0
    dq = q - q0
    out = (padded[:, :, r0, q0] * (1 - dr) * (1 - dq)
           + padded[:, :, r0 + 1, q0] * dr * (1 - dq)
           + padded[:, :, r0, q0 + 1] * (1 - dr) * dq
           + padded[:, :, r0 + 1, q0 + 1] * dr * dq)
    return out.astype(np.float32)


# ----------------------------------------------------------- transformations

def rotate(images: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the image center, bilinear, background fill."""
    images = np.asarray(images, dtype=np.float32)
    if degrees % 360 == 0:
        return images.copy()
    h, w = images.shape[-2:]
    cr, cc = (h - 1) / 2, (w - 1) / 2
    t = np.deg2rad(degrees)
    cos, sin = np.cos(t), np.sin(t)
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # inverse map: with row axis pointing down, a CCW turn of the picture sends
    # (dr, dc) -> (cos*dr - sin*dc, sin*dr + cos*dc)
    di, dj = i - cr, j - cc
    src_r = cos * di + sin * dj + cr
    src_c = -sin * di + cos * dj + cc
    return _sample_bilinear(images, src_r, src_c, BACKGROUND)


def zoom_center(images: np.ndarray, factor: float) -> np.ndarray:
    """Upscale by `factor` (bilinear, to round(32 * factor) pixels) and crop the center back to 32x32."""
    if factor < 1:
        raise ValueError(f"zoom factor must be >= 1, got {factor}")
    images = np.asarray(images, dtype=np.float32)
    h, w = images.shape[-2:]
    big_h, big_w = int(round(h * factor)), int(round(w * factor))
    if (big_h, big_w) == (h, w):
        return images.copy()
    big = resize_bilinear(images, big_h, big_w)
    top, left = (big_h - h) // 2, (big_w - w) // 2
    return np.ascontiguousarray(big[..., top:top + h, left:left + w])


def shift_vertical(images: np.ndarray, pixels: int) -> np.ndarray:
    """Move content up by `pixels` rows; the freed rows at the bottom become background."""
    h = np.shape(images)[-2]
    if int(pixels) != pixels or not 0 <= pixels <= h:
        raise ValueError(f"shift must be an integer in [0, {h}], got {pixels}")
    pixels = int(pixels)
    out = np.full_like(np.asarray(images, dtype=np.float32), BACKGROUND)
    out[..., :h - pixels, :] = images[..., pixels:, :]
    return out


def split_mid(images: np.ndarray, pixels: int) -> np.ndarray:
    """Insert `pixels` background rows at the middle, then crop pixels/2 rows at both ends."""
    h = np.shape(images)[-2]
    if int(pixels) != pixels or pixels < 0 or pixels % 2 or pixels > h - 6:
        raise ValueError(f"split must be a non-negative even integer <= {h - 6}, got {pixels}")
    pixels, half, mid = int(pixels), int(pixels) // 2, h // 2
    out = np.full_like(np.asarray(images, dtype=np.float32), BACKGROUND)
    out[..., :mid - half, :] = images[..., half:mid, :]
    out[..., mid + half:, :] = images[..., mid:h - half, :]
    return out


def make_domain_sequence(base: LabeledDataset, op: DomainOp, k: int) -> list[LabeledDataset]:
    """[source, T0, ..., T_{k-2}]: domain i applies `op` i times. Labels are carried through."""
    if k < 1:
        raise ValueError("k must be >= 1")
    domains = [base]
    images = base.images
    for _ in range(k - 1):
        images = op(images)
        domains.append(base.with_images(images))
    return domains
