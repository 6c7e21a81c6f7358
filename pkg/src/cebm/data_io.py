"""Datasets, file formats, and serialization.

Formats handled here:

* IDX rasters (big-endian, unsigned-byte payload) for MNIST-style data.
* The ``CEBM`` checkpoint container (little-endian)::

      b"CEBM" | u32 version | u32 len, model kind (utf-8) | u64 step
      | u32 len, metadata JSON (utf-8) | u32 entry count
      | entries: u32 len, name | u32 ndim | u64 dims... | u64 count | f64 payload

* Binary PGM (P5) / PPM (P6) tile grids for generated samples.
* JSON and CSV metric files.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "DataFormatError",
    "IdxMagicError",
    "TruncatedError",
    "CountMismatchError",
    "CheckpointError",
    "UnsupportedVersionError",
    "DuplicateNameError",
    "Dataset",
    "gen_synthetic",
    "SYNTHETIC_KINDS",
    "load_idx",
    "write_idx",
    "Checkpoint",
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "export_samples",
    "write_json",
    "write_csv",
]


class DataError(Exception):
    """Base class for every data or file-format failure."""


class DataFormatError(DataError):
    pass


class IdxMagicError(DataFormatError):
    def __init__(self, observed: int, expected: int):
        super().__init__(f"bad IDX magic 0x{observed:08x} (expected 0x{expected:08x})")
        self.observed = observed


class TruncatedError(DataFormatError):
    def __init__(self, what: str, offset: int):
        super().__init__(f"{what}: truncated at byte offset {offset}")
        self.offset = offset


class CountMismatchError(DataFormatError):
    pass


class CheckpointError(DataFormatError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Images in [0, 1] with shape (N, C, H, W) and integer labels in [0, L)."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "data"
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if n == 0:
            raise DataError("dataset is empty")
        if self.labels.shape != (n,):
            raise DataError(f"{n} images but labels of shape {self.labels.shape}")
        if not np.all(np.isfinite(self.images)) or self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values must lie in [0, 1]")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.name,
                       split or self.split, self.num_classes)


SYNTHETIC_KINDS = ("two_moons_raster", "gaussian_grid_raster", "bar_patterns")


def _bar_image(size: int, angle: float, offset: float, width: float) -> np.ndarray:
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # signed distance from the line through the (shifted) centre at `angle`
    dist = -(xx - c) * math.sin(angle) + (yy - c) * math.cos(angle) - offset
    return (np.abs(dist) <= width / 2.0).astype(np.float64)


def _intensity_pair_raster(coords: np.ndarray, size: int) -> np.ndarray:
    """Left half of each image holds u, right half holds v."""
    n = coords.shape[0]
    img = np.empty((n, 1, size, size))
    half = size // 2
    img[:, 0, :, :half] = coords[:, 0, None, None]
    img[:, 0, :, half:] = coords[:, 1, None, None]
    return img


def gen_synthetic(kind: str, n_per_class: int, image_size: int, rng: np.random.Generator,
                  num_classes: int = 4, noise: float = 0.0, jitter: float = 0.0,
                  bar_width: float | None = None, split: str = "train") -> Dataset:
    """Seed-deterministic synthetic rasters with known class structure.

    bar_patterns
        class c is a bar at angle c * pi / num_classes through the image
        centre, shifted perpendicular by Uniform[-jitter, jitter] pixels, plus
        Gaussian pixel noise of std ``noise`` (clipped to [0, 1]).
    gaussian_grid_raster
        class centres on a square grid in the unit square; each example draws
        a 2-D point N(centre, noise**2) and stores it as an intensity pair.
    two_moons_raster
        the two-moons point cloud (num_classes must be 2) rescaled to the unit
        square, embedded the same way.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if image_size < 4:
        raise ValueError("image_size must be at least 4")
    if n_per_class < 1 or num_classes < 2:
        raise ValueError("need n_per_class >= 1 and num_classes >= 2")
    if noise < 0 or jitter < 0:
        raise ValueError("noise and jitter must be non-negative")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    n = labels.size

    if kind == "bar_patterns":
        width = bar_width if bar_width is not None else max(1.0, image_size / 6.0)
        offsets = rng.uniform(-jitter, jitter, size=n) if jitter > 0 else np.zeros(n)
        imgs = np.stack([
            _bar_image(image_size, math.pi * lab / num_classes, off, width)
            for lab, off in zip(labels, offsets)
        ])[:, None]
        if noise > 0:
            imgs = np.clip(imgs + noise * rng.standard_normal(imgs.shape), 0.0, 1.0)
    elif kind == "gaussian_grid_raster":
        centers = grid_centers(num_classes)
        coords = centers[labels] + noise * rng.standard_normal((n, 2))
        imgs = _intensity_pair_raster(np.clip(coords, 0.0, 1.0), image_size)
    else:
        if num_classes != 2:
            raise ValueError("two_moons_raster has exactly two classes")
        t = rng.uniform(0.0, math.pi, size=n)
        pts = np.where(labels[:, None] == 0,
                       np.stack([np.cos(t), np.sin(t)], axis=1),
                       np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1))
        pts = pts + noise * rng.standard_normal((n, 2))
        pts = (pts - np.array([-1.0, -0.5])) / np.array([3.0, 1.5])
        imgs = _intensity_pair_raster(np.clip(pts, 0.0, 1.0), image_size)
    return Dataset(imgs, labels, name=kind, split=split, num_classes=num_classes)


def grid_centers(num_classes: int) -> np.ndarray:
    g = math.ceil(math.sqrt(num_classes))
    cells = [((i + 0.5) / g, (j + 0.5) / g) for i in range(g) for j in range(g)]
    return np.array(cells[:num_classes])


# --------------------------------------------------------------------------
# IDX

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: IDX header", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxMagicError(magic, expected_magic)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(f"{path}: IDX dimensions", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=object))
    if len(raw) < expected:
        raise TruncatedError(f"{path}: IDX payload", len(raw))
    if len(raw) > expected:
        raise DataFormatError(f"{path}: {len(raw) - expected} trailing bytes after IDX payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _area_downscale(images: np.ndarray, size: int) -> np.ndarray:
    n, h, w = images.shape
    if size > min(h, w):
        raise DataFormatError(f"cannot downscale {h}x{w} images to {size}x{size}")
    f = min(h, w) // size
    crop = size * f
    top, left = (h - crop) // 2, (w - crop) // 2
    x = images[:, top:top + crop, left:left + crop]
    return x.reshape(n, size, f, size, f).mean(axis=(2, 4))


def load_idx(images_path, labels_path, size: int | None = None, name: str = "idx",
             split: str = "train") -> Dataset:
    """Load an IDX image/label pair, scaled to [0, 1] and optionally area-downscaled."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise DataFormatError("IDX files contain no examples")
    x = images.astype(np.float64) / 255.0
    if size is not None and size != x.shape[1]:
        x = _area_downscale(x, size)
    return Dataset(x[:, None], labels.astype(np.int64), name=name, split=split)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 (N, H, W) images and (N,) labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"CEBM"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_kind: str
    params: dict
    step: int = 0
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    kind = ckpt.model_kind.encode("utf-8")
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", ckpt.version),
             struct.pack("<I", len(kind)), kind, struct.pack("<Q", int(ckpt.step)),
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.params))]
    for name, value in ckpt.params.items():
        arr = np.asarray(value, dtype="<f8")  # tobytes() below is C-order; keeps 0-d shapes
        key = name.encode("utf-8")
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), struct.pack("<Q", arr.size),
                  arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise TruncatedError(f"checkpoint {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str) -> str:
        (n,) = self.unpack("<I", what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"checkpoint {what} is not valid UTF-8") from None


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    kind = r.text("model kind")
    (step,) = r.unpack("<Q", "step")
    try:
        meta = json.loads(r.text("metadata"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint metadata is not valid JSON: {exc}") from None
    (count,) = r.unpack("<I", "entry count")
    params = {}
    for _ in range(count):
        name = r.text("parameter name")
        if name in params:
            raise DuplicateNameError(f"duplicate parameter name {name!r}")
        (ndim,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        (n,) = r.unpack("<Q", f"{name} length")
        if n != math.prod(shape):
            raise CheckpointError(f"{name}: payload length {n} does not match shape {shape}")
        payload = r.take(8 * n, f"{name} payload")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{len(r.raw) - r.pos} trailing bytes after checkpoint table")
    return Checkpoint(kind, params, step, meta, version)


# --------------------------------------------------------------------------
# sample export and metric files


def export_samples(path, batch, grid_cols: int, step: int = 0, seed: int = 0) -> tuple:
    """Write a (N, C, H, W) batch as an 8-bit PGM (C=1) or PPM (C=3) tile grid.

    Returns the (width, height) of the written image.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1] not in (1, 3) or batch.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N, 1|3, H, W) batch, got {batch.shape}")
    if grid_cols < 1:
        raise ValueError("grid_cols must be positive")
    n, c, h, w = batch.shape
    cols = min(grid_cols, n)
    rows = -(-n // cols)
    q = np.rint(np.clip(batch, 0.0, 1.0) * 255.0).astype(np.uint8)
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        grid[r * h:(r + 1) * h, k * w:(k + 1) * w] = q[i].transpose(1, 2, 0)
    tag = b"P5" if c == 1 else b"P6"
    header = tag + f"\n# step={step} seed={seed}\n{cols * w} {rows * h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + grid.tobytes())
    return cols * w, rows * h


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
