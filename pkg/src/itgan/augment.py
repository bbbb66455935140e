"""Differentiable Siamese augmentation: one sampled transform applied identically to
every image of the real and synthetic batches of a class."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import tensor as T

KINDS = ("none", "flip-h", "crop-shift", "scale", "rotate", "cutout", "brightness")
DEFAULT_OPS = KINDS


@dataclass(frozen=True)
class AugmentConfig:
    ops: tuple[str, ...] = DEFAULT_OPS
    shift_px: int = 2
    scale_range: tuple[float, float] = (0.8, 1.2)
    rotate_deg: float = 15.0
    cutout_frac: float = 0.25
    brightness: float = 0.3

    def __post_init__(self) -> None:
        bad = [k for k in self.ops if k not in KINDS]
        if bad or not self.ops:
            raise ValueError(f"unknown augmentation kinds {bad}; choose from {KINDS}")


@dataclass(frozen=True)
class AugmentParams:
    kind: str = "none"
    dx: int = 0
    dy: int = 0
    scale: float = 1.0
    angle_deg: float = 0.0
    cx: int = 0
    cy: int = 0
    cutout_frac: float = 0.25
    delta: float = 0.0


NONE = AugmentParams()


def sample_omega(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(), size: int = 16) -> AugmentParams:
    """Op kind uniform over the enabled set, its parameters uniform in range."""
    kind = cfg.ops[int(rng.integers(len(cfg.ops)))]
    if kind == "crop-shift":
        dx, dy = rng.integers(-cfg.shift_px, cfg.shift_px + 1, size=2)
        return AugmentParams(kind, dx=int(dx), dy=int(dy))
    if kind == "scale":
        return AugmentParams(kind, scale=float(rng.uniform(*cfg.scale_range)))
    if kind == "rotate":
        return AugmentParams(kind, angle_deg=float(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)))
    if kind == "cutout":
        cx, cy = rng.integers(0, size, size=2)
        return AugmentParams(kind, cx=int(cx), cy=int(cy), cutout_frac=cfg.cutout_frac)
    if kind == "brightness":
        return AugmentParams(kind, delta=float(rng.uniform(-cfg.brightness, cfg.brightness)))
    return AugmentParams(kind)


def _affine(images: torch.Tensor, mat: list[list[float]]) -> torch.Tensor:
    if mat == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]:
        # Identity: f32 grid coordinates would otherwise blur by ~1e-6.
        return images
    theta = torch.tensor([mat], dtype=images.dtype).expand(images.shape[0], 2, 3)
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    return T.grid_sample(images, grid)


def _shift(images: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    # out[y, x] = in[y - dy, x - dx], zeros where the source falls outside.
    p = max(abs(dx), abs(dy))
    if p == 0:
        return images
    h, w = images.shape[2:]
    padded = F.pad(images, (p, p, p, p))
    return padded[:, :, p - dy : p - dy + h, p - dx : p - dx + w]


def cutout_mask(h: int, w: int, omega: AugmentParams, dtype: torch.dtype) -> torch.Tensor:
    side_y = max(int(round(h * omega.cutout_frac)), 1)
    side_x = max(int(round(w * omega.cutout_frac)), 1)
    y0, x0 = omega.cy - side_y // 2, omega.cx - side_x // 2
    mask = torch.ones(h, w, dtype=dtype)
    mask[max(y0, 0) : max(y0 + side_y, 0), max(x0, 0) : max(x0 + side_x, 0)] = 0
    return mask


def apply(images: torch.Tensor, omega: AugmentParams) -> torch.Tensor:
    """Apply ``omega`` to every image of an NCHW batch; output shape equals input shape."""
    k = omega.kind
    if k == "none":
        return images
    if k == "flip-h":
        return images.flip(3)
    if k == "crop-shift":
        return _shift(images, omega.dx, omega.dy)
    if k == "scale":
        s = 1.0 / omega.scale
        return _affine(images, [[s, 0.0, 0.0], [0.0, s, 0.0]])
    if k == "rotate":
        a = math.radians(omega.angle_deg)
        c, s = math.cos(a), math.sin(a)
        return _affine(images, [[c, -s, 0.0], [s, c, 0.0]])
    if k == "cutout":
        return images * cutout_mask(images.shape[2], images.shape[3], omega, images.dtype)
    if k == "brightness":
        return images + omega.delta
    raise ValueError(f"unknown augmentation kind {k!r}")


def siamese_apply(real: torch.Tensor, synth: torch.Tensor, omega: AugmentParams) -> tuple[torch.Tensor, torch.Tensor]:
    if real.shape[1:] != synth.shape[1:]:
        raise T.ShapeError(f"siamese_apply: image shapes differ {tuple(real.shape[1:])} vs {tuple(synth.shape[1:])}")
    return apply(real, omega), apply(synth, omega)
