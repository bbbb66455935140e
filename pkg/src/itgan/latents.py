"""Latent vector sets and the ITGZ file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ITGZ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQB")
PROVENANCE = ("random", "inverted", "condensed")


class LatentFormatError(ValueError):
    pass


@dataclass
class LatentSet:
    """Latent vectors ``z`` (N, d_z), their class labels and the index of the
    real training image each one is paired with."""

    z: torch.Tensor
    labels: np.ndarray
    indices: np.ndarray
    n_classes: int
    provenance: str = "inverted"

    def __post_init__(self) -> None:
        self.z = self.z.detach().to(torch.float32).contiguous()
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.z.dim() != 2 or len(self.z) != len(self.labels) or len(self.labels) != len(self.indices):
            raise ValueError("z, labels and indices must agree on N")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("latent label outside class range")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("correspondence indices must be unique")
        if not bool(torch.isfinite(self.z).all()):
            raise ValueError("latent vectors must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def latent_dim(self) -> int:
        return self.z.shape[1]

    def class_positions(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def check_pairing(self, dataset) -> None:
        """Raise if any latent's label differs from the label of its paired real image."""
        if len(self.indices) and self.indices.max() >= len(dataset):
            raise ValueError("correspondence index outside the dataset")
        bad = np.flatnonzero(dataset.labels[self.indices] != self.labels)
        if len(bad):
            raise ValueError(f"pairing violation at latent positions {bad[:5].tolist()}")

    def take(self, pos: np.ndarray, provenance: str | None = None) -> LatentSet:
        return LatentSet(self.z[pos], self.labels[pos], self.indices[pos], self.n_classes, provenance or self.provenance)

    def with_z(self, z: torch.Tensor, provenance: str) -> LatentSet:
        return LatentSet(z, self.labels.copy(), self.indices.copy(), self.n_classes, provenance)


def concat(sets: list[LatentSet], provenance: str | None = None) -> LatentSet:
    return LatentSet(
        torch.cat([s.z for s in sets]),
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.indices for s in sets]),
        sets[0].n_classes,
        provenance or sets[0].provenance,
    )


def latents_bytes(zs: LatentSet) -> bytes:
    head = _HEADER.pack(MAGIC, VERSION, zs.n_classes, zs.latent_dim, len(zs), PROVENANCE.index(zs.provenance))
    return b"".join(
        [
            head,
            zs.labels.astype("<u4").tobytes(),
            zs.indices.astype("<u8").tobytes(),
            zs.z.numpy().astype("<f4").tobytes(),
        ]
    )


def save_latents(zs: LatentSet, path: str | Path) -> None:
    Path(path).write_bytes(latents_bytes(zs))


def parse_latents(buf: bytes) -> LatentSet:
    if len(buf) < _HEADER.size:
        raise LatentFormatError("truncated header")
    magic, version, c, d, n, prov = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise LatentFormatError(f"bad magic {magic!r}")
    if version > VERSION:
        raise LatentFormatError(f"unsupported version {version}")
    if prov >= len(PROVENANCE):
        raise LatentFormatError(f"unknown provenance code {prov}")
    need = _HEADER.size + 4 * n + 8 * n + 4 * n * d
    if len(buf) < need:
        raise LatentFormatError(f"truncated payload: {len(buf)} bytes, expected {need}")
    off = _HEADER.size
    labels = np.frombuffer(buf, "<u4", n, off).astype(np.int64)
    off += 4 * n
    indices = np.frombuffer(buf, "<u8", n, off).astype(np.int64)
    off += 8 * n
    z = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d).copy()
    try:
        return LatentSet(torch.from_numpy(z), labels, indices, c, PROVENANCE[prov])
    except ValueError as exc:
        raise LatentFormatError(str(exc)) from exc


def load_latents(path: str | Path) -> LatentSet:
    return parse_latents(Path(path).read_bytes())


def random_latents(dataset, per_class: int, latent_dim: int, seed: int) -> LatentSet:
    """z ~ N(0, I); each latent is paired with a distinct random real image of its class."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    labels, indices = [], []
    for c in range(dataset.n_classes):
        pool = dataset.class_indices(c)
        pick = np.sort(rng.choice(pool, size=min(per_class, len(pool)), replace=False))
        labels.append(np.full(len(pick), c))
        indices.append(pick)
    labels_a = np.concatenate(labels)
    z = torch.randn(len(labels_a), latent_dim, generator=gen)
    return LatentSet(z, labels_a, np.concatenate(indices), dataset.n_classes, "random")
