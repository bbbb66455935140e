"""Procedural shapes dataset, the ITGD file format and per-class batch sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ITGD"
VERSION = 1
_HEADER = struct.Struct("<4sIQIIII")

SHAPE_FAMILIES = (
    "bar-h",
    "bar-v",
    "cross",
    "disk",
    "ring",
    "square",
    "triangle",
    "diagonal",
    "checker",
    "dot-pair",
)

NOISE_SIGMA = 0.05
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Labeled u8 images, shape (N, H, W, Ch), channel-last."""

    pixels: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "all"

    def __post_init__(self) -> None:
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be (N, H, W, Ch), got {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("labels and pixels disagree on N")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"label outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(Ch, H, W) as seen by the networks."""
        _, h, w, ch = self.pixels.shape
        return ch, h, w

    @property
    def d_image(self) -> int:
        return int(np.prod(self.pixels.shape[1:]))

    def images(self, idx: np.ndarray | None = None, dtype: torch.dtype | None = None) -> torch.Tensor:
        """Images as an NCHW tensor normalized to [-1, 1] via p/127.5 - 1."""
        px = self.pixels if idx is None else self.pixels[idx]
        t = torch.from_numpy(px.astype(np.float64) / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()
        return t.to(dtype or torch.get_default_dtype())

    def targets(self, idx: np.ndarray | None = None) -> torch.Tensor:
        return torch.from_numpy(self.labels if idx is None else self.labels[idx])

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx: np.ndarray, split: str | None = None) -> Dataset:
        return Dataset(self.pixels[idx], self.labels[idx], self.n_classes, split or self.split)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.labels, other.labels)
            and self.pixels.shape == other.pixels.shape
            and np.array_equal(self.pixels, other.pixels)
        )


def normalize(p: np.ndarray | int) -> np.ndarray | float:
    return np.asarray(p, dtype=np.float64) / 127.5 - 1.0


def quantize(x: torch.Tensor | np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize` for values in [-1, 1]: round(127.5 (x + 1))."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.clip(np.rint(127.5 * (np.asarray(x, dtype=np.float64) + 1.0)), 0, 255).astype(np.uint8)


def from_images(images: torch.Tensor, labels, n_classes: int, split: str = "synthetic") -> Dataset:
    """Build a u8 dataset from NCHW images in [-1, 1]."""
    px = quantize(images.permute(0, 2, 3, 1))
    return Dataset(px, np.asarray(labels, dtype=np.int64), n_classes, split)


# ------------------------------------------------------------------ generator


def _shape_mask(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    box = (np.abs(u) < 1) & (np.abs(v) < 1)
    if family == "bar-h":
        return (np.abs(v) < 0.3) & (np.abs(u) < 1)
    if family == "bar-v":
        return (np.abs(u) < 0.3) & (np.abs(v) < 1)
    if family == "cross":
        return ((np.abs(v) < 0.25) | (np.abs(u) < 0.25)) & box
    if family == "disk":
        return r < 1
    if family == "ring":
        return (r < 1) & (r > 0.6)
    if family == "square":
        return (np.abs(u) < 0.85) & (np.abs(v) < 0.85)
    if family == "triangle":
        return (v > -0.85) & (v < 0.85) & (np.abs(u) < (v + 0.85) / 1.7)
    if family == "diagonal":
        return (np.abs(u - v) < 0.45) & box
    if family == "checker":
        return ((np.floor(u * 1.5 + 3).astype(int) + np.floor(v * 1.5 + 3).astype(int)) % 2 == 0) & box
    if family == "dot-pair":
        return ((u - 0.6) ** 2 + v**2 < 0.16) | ((u + 0.6) ** 2 + v**2 < 0.16)
    raise ValueError(f"unknown shape family {family!r}")


def _render(family: str, size: int, rng: np.random.Generator, supersample: int = 4) -> np.ndarray:
    scale = rng.uniform(3.0, 6.5)
    cx = rng.uniform(size / 2 - 3, size / 2 + 3)
    cy = rng.uniform(size / 2 - 3, size / 2 + 3)
    # Bright shape on a darker background; the two ranges keep it inside [0, 1].
    background = rng.uniform(0.05, 0.35)
    contrast = rng.uniform(0.25, 0.6)
    foreground = background + contrast
    ss = supersample
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = _shape_mask(family, (xx - cx) / scale, (yy - cy) / scale).astype(np.float64)
    cover = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
    img = background + (foreground - background) * cover
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_shapes(
    n_classes: int = 10,
    per_class: int = 500,
    size: int = 16,
    channels: int = 1,
    seed: int = 0,
) -> Dataset:
    """Deterministic shapes dataset: one family per class, images ordered class-major."""
    if not 1 <= n_classes <= len(SHAPE_FAMILIES):
        raise ValueError(f"n_classes must be in [1, {len(SHAPE_FAMILIES)}], got {n_classes}")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    pixels = np.empty((n_classes * per_class, size, size, channels), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes), per_class)
    for i, c in enumerate(labels):
        img = _render(SHAPE_FAMILIES[c], size, rng)
        if channels > 1:
            tint = rng.uniform(0.7, 1.0, size=channels)
            img = img[..., None] * tint
        else:
            img = img[..., None]
        pixels[i] = np.rint(img * 255.0).astype(np.uint8)
    return Dataset(pixels, labels, n_classes, "all")


def split_dataset(ds: Dataset, fractions: tuple[float, float, float] = SPLIT_FRACTIONS, seed: int = 0) -> dict[str, Dataset]:
    """Stratified train/val/test split (shuffled within each class by ``seed``)."""
    rng = np.random.default_rng(seed)
    parts: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    for c in range(ds.n_classes):
        idx = rng.permutation(ds.class_indices(c))
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr : n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va :])
    return {name: ds.subset(np.sort(np.concatenate(p)), name) for name, p in parts.items()}


# ------------------------------------------------------------------------- io


def dataset_bytes(ds: Dataset) -> bytes:
    n, h, w, ch = ds.pixels.shape
    header = _HEADER.pack(MAGIC, VERSION, n, h, w, ch, ds.n_classes)
    return header + ds.labels.astype("<u4").tobytes() + ds.pixels.tobytes()


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(buf: bytes, split: str = "all") -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    magic, version, n, h, w, ch, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version > VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    need = _HEADER.size + 4 * n + n * h * w * ch
    if len(buf) < need:
        raise DatasetFormatError(f"truncated payload: {len(buf)} bytes, expected {need}")
    off = _HEADER.size
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(np.int64)
    if n and labels.max() >= c:
        raise DatasetFormatError(f"label {labels.max()} >= class count {c}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n * h * w * ch, offset=off + 4 * n)
    return Dataset(pixels.reshape(n, h, w, ch).copy(), labels, c, split)


def load_dataset(path: str | Path, split: str = "all") -> Dataset:
    return parse_dataset(Path(path).read_bytes(), split)


# ------------------------------------------------------------------- sampling


class EmptyClassError(ValueError):
    pass


def sample_class_batches(
    ds: Dataset,
    c: int,
    b: int,
    b_large: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Draw a pair batch and an independent large batch from class ``c``.

    Returns dataset indices ``(B, B_large, replaced)``; ``replaced`` is set when
    the class was too small and either draw had to use replacement.
    """
    pool = ds.class_indices(c)
    if len(pool) == 0:
        raise EmptyClassError(f"class {c} is empty")
    small = len(pool) < max(b, b_large)
    return _draw(pool, b, rng), _draw(pool, b_large, rng), small


def _draw(pool: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    if k <= len(pool):
        return pool[rng.choice(len(pool), size=k, replace=False)]
    return pool[rng.choice(len(pool), size=k, replace=True)]


@dataclass
class ClassBatchSampler:
    ds: Dataset
    b: int
    b_large: int
    seed: int = 0

    def __post_init__(self) -> None:
        self.rng = np.random.default_rng(self.seed)

    def sample(self, c: int) -> tuple[np.ndarray, np.ndarray, bool]:
        return sample_class_batches(self.ds, c, self.b, self.b_large, self.rng)
