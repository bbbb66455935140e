"""Supervised classifier training loop shared by the snapshot pool and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import augment as A
from . import tensor as T

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 60
    lr: float = 0.01
    lr_decay_at: float = 0.5
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 64
    augment: bool = True
    augment_cfg: A.AugmentConfig = A.AugmentConfig()


@dataclass
class Curves:
    epoch: list[int] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)

    @property
    def final_test_acc(self) -> float:
        return self.test_acc[-1] if self.test_acc else float("nan")

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "train_acc": self.train_acc, "test_acc": self.test_acc, "loss": self.loss}


@torch.no_grad()
def accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch: int = 500) -> float:
    if len(x) == 0:
        return float("nan")
    correct = 0
    for i in range(0, len(x), batch):
        correct += int((model(x[i : i + batch]).argmax(1) == y[i : i + batch]).sum())
    return correct / len(x)


@T.unchecked
def fit(
    model: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: FitConfig,
    seed: int,
    x_test: torch.Tensor | None = None,
    y_test: torch.Tensor | None = None,
    on_epoch: Callable[[int, nn.Module], None] | None = None,
) -> Curves:
    """SGD with a single step decay of the learning rate at ``lr_decay_at`` of the epochs.

    Entry 0 of the curves is the untrained model; entry e is after epoch e.
    """
    if len(x) == 0:
        raise ValueError("empty training set")
    gen = T.generator(seed)
    rng = np.random.default_rng(seed)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = T.sgd(cfg.lr, cfg.momentum, cfg.weight_decay)
    curves = Curves()

    def record(epoch: int, train_acc: float, loss: float) -> None:
        curves.epoch.append(epoch)
        curves.train_acc.append(train_acc)
        curves.loss.append(loss)
        if x_test is not None:
            curves.test_acc.append(accuracy(model, x_test, y_test))

    record(0, accuracy(model, x, y) if cfg.epochs == 0 else float("nan"), float("nan"))
    if on_epoch:
        on_epoch(0, model)
    decay_epoch = int(cfg.epochs * cfg.lr_decay_at)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * (cfg.lr_decay if epoch >= decay_epoch else 1.0)
        order = torch.randperm(len(x), generator=gen)
        correct, total, loss_sum = 0, 0, 0.0
        for i in range(0, len(x), cfg.batch):
            idx = order[i : i + cfg.batch]
            xb, yb = x[idx], y[idx]
            if cfg.augment:
                xb = A.apply(xb, A.sample_omega(rng, cfg.augment_cfg, xb.shape[-1]))
            logits = model(xb)
            loss = T.softmax_cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            T.backward(loss)
            T.step(params, opt)
            correct += int((logits.argmax(1) == yb).sum())
            total += len(yb)
            loss_sum += float(loss.detach()) * len(yb)
        record(epoch + 1, correct / total, loss_sum / total)
        if on_epoch:
            on_epoch(epoch + 1, model)
    return curves
