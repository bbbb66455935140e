"""Conditional GAN pretraining: the generator that condensation later freezes."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import augment as A
from . import models as M
from . import tensor as T
from .data import Dataset

log = logging.getLogger(__name__)

LOGIT_CLAMP = 30.0


class GanDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class GanTrainConfig:
    epochs: int = 30
    batch: int = 64
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    betas: tuple[float, float] = (0.5, 0.999)
    latent_dim: int = 64
    g_base: int = 128
    d_base: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    # Weight of the auxiliary class term; 0 leaves the plain conditional game.
    aux_weight: float = 0.0
    d_conditioning: str = "planes"
    diff_augment: bool = False
    freeze_batches: int = 16

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        if self.d_conditioning not in M.Discriminator.CONDITIONING:
            raise ValueError(f"d_conditioning must be one of {M.Discriminator.CONDITIONING}")


def _require_finite(loss: torch.Tensor, name: str) -> None:
    if not math.isfinite(float(loss.detach())):
        raise T.NonFiniteError(f"{name}: non-finite output")


def _clamp(logits: torch.Tensor) -> torch.Tensor:
    return logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


def d_loss_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """-mean log sigmoid(real) - mean log(1 - sigmoid(fake)), computed stably."""
    loss = F.softplus(-_clamp(real_logits)).mean() + F.softplus(_clamp(fake_logits)).mean()
    return T.check_finite(loss, "d_loss")


def g_loss_from_logits(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -mean log sigmoid(D(G(z)))."""
    return T.check_finite(F.softplus(-_clamp(fake_logits)).mean(), "g_loss")


def d_loss(D: M.Discriminator, real: torch.Tensor, fake: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if real.shape != fake.shape:
        raise T.ShapeError(f"d_loss: real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    return d_loss_from_logits(D(real, y), D(fake, y))


def g_loss(D: M.Discriminator, fake: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return g_loss_from_logits(D(fake, y))


@T.unchecked
def pretrain(
    train: Dataset,
    cfg: GanTrainConfig = GanTrainConfig(),
    checkpoint_dir: str | Path | None = None,
    emit: Callable[[dict], None] | None = None,
) -> tuple[M.ConditionalGenerator, M.Discriminator, list[dict]]:
    """Alternate one D step and one G step per batch; return the frozen G, D and the log."""
    if len(train) == 0:
        raise ValueError("empty training split")
    ch, h, _ = train.image_shape
    G = M.generator_init(cfg.seed, n_classes=train.n_classes, latent_dim=cfg.latent_dim, channels=ch, image_size=h, base=cfg.g_base)
    D = M.discriminator_init(
        cfg.seed + 1, n_classes=train.n_classes, channels=ch, image_size=h, base=cfg.d_base,
        conditioning=cfg.d_conditioning,
    )
    gp, dp = list(G.parameters()), list(D.parameters())
    opt_g = T.adam(cfg.lr_g, cfg.betas)
    opt_d = T.adam(cfg.lr_d, cfg.betas)
    gen = T.generator(cfg.seed + 2)
    rng = np.random.default_rng(cfg.seed + 3)
    x_all, y_all = train.images(), train.targets()
    report: list[dict] = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(train), generator=gen)
        ld_sum = lg_sum = 0.0
        steps = 0
        for i in range(0, len(order) - cfg.batch + 1, cfg.batch):
            idx = order[i : i + cfg.batch]
            real, y = x_all[idx], y_all[idx]
            z = torch.randn(len(idx), cfg.latent_dim, generator=gen)
            fake = G(z, y)
            if cfg.diff_augment:
                omega = A.sample_omega(rng, size=h)
                aug_real, aug_fake = A.siamese_apply(real, fake, omega)
            else:
                aug_real, aug_fake = real, fake
            try:
                h_real = D.features(aug_real, y)
                ld = d_loss_from_logits(D.logit(h_real, y), D(aug_fake.detach(), y))
                _require_finite(ld, "d_loss")
                ld_total = ld + cfg.aux_weight * T.softmax_cross_entropy(D.class_logits(h_real), y) if cfg.aux_weight else ld
                T.backward(ld_total)
                T.step(dp, opt_d)
                h_fake = D.features(aug_fake, y)
                lg = g_loss_from_logits(D.logit(h_fake, y))
                lg_total = lg + cfg.aux_weight * T.softmax_cross_entropy(D.class_logits(h_fake), y) if cfg.aux_weight else lg
                T.backward(lg_total)
            except T.NonFiniteError as exc:
                raise GanDiverged(f"non-finite GAN loss at epoch {epoch + 1}, step {steps + 1}: {exc}") from exc
            for p in dp:
                p.grad = None
            T.step(gp, opt_g)
            ld, lg = ld.detach(), lg.detach()
            ld_sum += float(ld)
            lg_sum += float(lg)
            steps += 1
        rec = {
            "stage": "gan-pretrain",
            "epoch": epoch + 1,
            "d_loss": ld_sum / max(steps, 1),
            "g_loss": lg_sum / max(steps, 1),
            "wall_time": time.perf_counter() - t0,
        }
        report.append(rec)
        if emit:
            emit(rec)
        log.info("gan epoch %d d=%.4f g=%.4f", epoch + 1, rec["d_loss"], rec["g_loss"])
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            M.save_weights(M.generator_weights(G), Path(checkpoint_dir) / f"generator_e{epoch + 1:03d}.itgw")
    G.freeze(n_batches=cfg.freeze_batches, seed=cfg.seed + 4)
    return G, D, report


@torch.no_grad()
def sample_dataset(G: M.ConditionalGenerator, per_class: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    gen = T.generator(seed)
    y = torch.arange(G.n_classes).repeat_interleave(per_class)
    z = torch.randn(len(y), G.latent_dim, generator=gen)
    return G(z, y), y


def sanity_gate(
    G: M.ConditionalGenerator,
    val: Dataset,
    per_class: int = 500,
    epochs: int = 4,
    width: int = 32,
    seed: int = 0,
) -> float:
    """Real-validation accuracy of a ConvNet trained only on generated samples."""
    from .training import FitConfig, fit

    x, y = sample_dataset(G, per_class, seed)
    ch, h, _ = val.image_shape
    net = M.embedder_init_random(seed, ch, G.n_classes, width, h)
    curves = fit(net, x, y, FitConfig(epochs=epochs), seed, val.images(), val.targets())
    return curves.final_test_acc
