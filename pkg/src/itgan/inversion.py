"""Optimization-based GAN inversion used to initialize the latent set.

Each latent minimizes a feature distance under a pretrained embedder plus a
pixel distance, both normalized by their dimension.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import models as M
from . import tensor as T
from .data import Dataset
from .latents import LatentSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 400
    lr: float = 0.05
    lam_pixel: float = 1.0
    restarts: int = 2
    batch: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lam_pixel < 0:
            raise ValueError("lam_pixel must be >= 0")
        if self.steps < 1 or self.restarts < 1 or self.batch < 1:
            raise ValueError("steps, restarts and batch must be >= 1")


@dataclass
class InversionResult:
    z: torch.Tensor
    objective: torch.Tensor
    initial_objective: torch.Tensor
    best_trace: list[torch.Tensor] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def objective_terms(
    feat_gen: torch.Tensor,
    feat_real: torch.Tensor,
    gen: torch.Tensor,
    real: torch.Tensor,
    lam_pixel: float,
) -> torch.Tensor:
    """Per-row ``|f_gen - f_real|^2 / d_f + lam_pixel |gen - real|^2 / d_I``."""
    d_f = feat_gen[0].numel()
    d_i = gen[0].numel()
    feat = ((feat_gen - feat_real) ** 2).flatten(1).sum(1) / d_f
    pix = ((gen - real) ** 2).flatten(1).sum(1) / d_i
    return feat + lam_pixel * pix


def inversion_objective(
    G: M.ConditionalGenerator,
    psi: M.ConvNet,
    z: torch.Tensor,
    y: torch.Tensor,
    x: torch.Tensor,
    lam_pixel: float = 1.0,
    feat_x: torch.Tensor | None = None,
) -> torch.Tensor:
    """Objective of every (z_i, x_i) pair, shape (N,)."""
    gz = G(z, y)
    if feat_x is None:
        feat_x = psi.embed(x)
    return T.check_finite(objective_terms(psi.embed(gz), feat_x, gz, x, lam_pixel), "inversion_objective")


def _freeze(net: torch.nn.Module) -> list[bool]:
    flags = [p.requires_grad for p in net.parameters()]
    for p in net.parameters():
        p.requires_grad_(False)
    return flags


def _restore(net: torch.nn.Module, flags: list[bool]) -> None:
    for p, f in zip(net.parameters(), flags):
        p.requires_grad_(f)


@T.unchecked
def invert_batch(
    G: M.ConditionalGenerator,
    psi: M.ConvNet,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: InversionConfig,
    gen: torch.Generator,
    z_init: torch.Tensor | None = None,
) -> InversionResult:
    """Invert a batch jointly; the summed objective keeps every image's problem independent.

    Restart 0 starts from ``z_init`` when given, every other restart from N(0, I).
    The best iterate seen per image (including the starting point) is returned.
    """
    g_flags, p_flags = _freeze(G), _freeze(psi)
    try:
        with torch.no_grad():
            feat_x = psi.embed(x)
        n = len(x)
        best_z = torch.zeros(n, G.latent_dim)
        best_obj = torch.full((n,), math.inf)
        initial = None
        trace: list[torch.Tensor] = []
        warnings: list[str] = []
        for r in range(cfg.restarts):
            start = z_init if (r == 0 and z_init is not None) else torch.randn(n, G.latent_dim, generator=gen)
            z = start.detach().clone().to(torch.get_default_dtype()).requires_grad_(True)
            opt = T.adam(cfg.lr)
            for s in range(cfg.steps + 1):
                gz = G(z, y)
                obj = objective_terms(psi.embed(gz), feat_x, gz, x, cfg.lam_pixel)
                od = obj.detach()
                if not bool(torch.isfinite(od).all()):
                    warnings.append(f"restart {r}: non-finite objective at step {s}; keeping best finite iterate")
                    break
                if initial is None:
                    initial = od.clone()
                better = od < best_obj
                best_obj = torch.where(better, od, best_obj)
                best_z[better] = z.detach()[better].to(best_z.dtype)
                trace.append(best_obj.clone())
                if s == cfg.steps:
                    break
                z.grad = None
                T.backward(obj.sum())
                T.adam_step([z], [z.grad], opt)
        return InversionResult(best_z, best_obj, initial, trace, warnings)
    finally:
        _restore(G, g_flags)
        _restore(psi, p_flags)


def invert_one(
    G: M.ConditionalGenerator,
    psi: M.ConvNet,
    x: torch.Tensor,
    y: int,
    cfg: InversionConfig,
    gen: torch.Generator,
    z_init: torch.Tensor | None = None,
) -> InversionResult:
    """Invert a single image ``x`` of shape (C, H, W)."""
    return invert_batch(G, psi, x[None], torch.tensor([y]), cfg, gen, None if z_init is None else z_init.view(1, -1))


def select_subset(dataset: Dataset, per_class: int | None, seed: int) -> np.ndarray:
    """Indices of ``per_class`` random images of every class (all images when None), sorted."""
    if per_class is None:
        return np.arange(len(dataset))
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(dataset.n_classes):
        pool = dataset.class_indices(c)
        if per_class > len(pool):
            raise ValueError(f"class {c} has {len(pool)} images, {per_class} requested")
        picks.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
    return np.concatenate(picks)


def invert_all(
    G: M.ConditionalGenerator,
    psi: M.ConvNet,
    dataset: Dataset,
    cfg: InversionConfig = InversionConfig(),
    per_class: int | None = None,
    report: list[dict] | None = None,
) -> LatentSet:
    """One inverted latent per selected real image, batched class by class."""
    chosen = select_subset(dataset, per_class, cfg.seed)
    gen = T.generator(cfg.seed)
    zs, labels, indices = [], [], []
    for c in range(dataset.n_classes):
        idx_c = chosen[dataset.labels[chosen] == c]
        for i in range(0, len(idx_c), cfg.batch):
            idx = idx_c[i : i + cfg.batch]
            res = invert_batch(G, psi, dataset.images(idx), dataset.targets(idx), cfg, gen)
            zs.append(res.z)
            labels.append(dataset.labels[idx])
            indices.append(idx)
            if report is not None:
                report.append(
                    {
                        "stage": "invert",
                        "class": c,
                        "batch_start": int(i),
                        "n": len(idx),
                        "initial_median": float(res.initial_objective.median()),
                        "final_median": float(res.objective.median()),
                        "warnings": res.warnings,
                    }
                )
            for w in res.warnings:
                log.warning("class %d batch %d: %s", c, i, w)
    return LatentSet(torch.cat(zs), np.concatenate(labels), np.concatenate(indices), dataset.n_classes, "inverted")
