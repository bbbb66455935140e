from __future__ import annotations

import math
from dataclasses import replace

import pytest
import torch

from itgan import gan
from itgan import models as M
from itgan import tensor as T
from conftest import rand

TINY = gan.GanTrainConfig(epochs=1, batch=16, latent_dim=8, g_base=16, d_base=8, freeze_batches=2)


def _zero_logit_D() -> M.Discriminator:
    D = M.discriminator_init(0, n_classes=4, base=8)
    with torch.no_grad():
        D.fc.weight.zero_()
        D.fc.bias.zero_()
    return D


def test_d_loss_at_zero_logits():
    x, y = torch.randn(6, 1, 16, 16), torch.tensor([0, 1, 2, 3, 0, 1])
    assert gan.d_loss(_zero_logit_D(), x, x, y).item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_d_loss_perfect_discriminator():
    loss = gan.d_loss_from_logits(torch.full((8,), 30.0, dtype=torch.float64), torch.full((8,), -30.0, dtype=torch.float64))
    assert loss.item() < 1e-10


def test_d_loss_clamps_extreme_logits():
    loss = gan.d_loss_from_logits(torch.tensor([-1e6]), torch.tensor([1e6]))
    assert math.isfinite(loss.item())


def test_d_loss_matched_distributions_reach_log4():
    # Real and fake drawn from one distribution: the best logistic D can do is 1/2 everywhere.
    real, fake = rand(4000, 2, seed=1), rand(4000, 2, seed=2)
    w = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    state = T.adam(0.05)
    for _ in range(200):
        T.backward(gan.d_loss_from_logits(real @ w + b, fake @ w + b))
        T.step([w, b], state)
    assert gan.d_loss_from_logits(real @ w + b, fake @ w + b).item() == pytest.approx(math.log(4), abs=5e-3)


def test_d_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        gan.d_loss(_zero_logit_D(), torch.zeros(2, 1, 16, 16), torch.zeros(3, 1, 16, 16), torch.tensor([0, 1]))


def test_g_loss_values():
    x, y = torch.randn(4, 1, 16, 16), torch.tensor([0, 1, 2, 3])
    assert gan.g_loss(_zero_logit_D(), x, y).item() == pytest.approx(math.log(2), abs=1e-6)
    assert gan.g_loss_from_logits(torch.full((4,), 30.0, dtype=torch.float64)).item() < 1e-12


def test_g_loss_gradient_wrt_latent_is_nonzero(frozen_G):
    D = M.discriminator_init(3, n_classes=4, base=8)
    z = torch.randn(4, 8, requires_grad=True)
    T.backward(gan.g_loss(D, frozen_G(z, torch.tensor([0, 1, 2, 3])), torch.tensor([0, 1, 2, 3])))
    assert z.grad.norm().item() > 0


def test_zero_epochs_returns_initialization(tiny_splits):
    cfg = replace(TINY, epochs=0)
    G, D, report = gan.pretrain(tiny_splits["train"], cfg)
    G0 = M.generator_init(cfg.seed, n_classes=4, latent_dim=8, channels=1, image_size=16, base=16)
    D0 = M.discriminator_init(cfg.seed + 1, n_classes=4, channels=1, image_size=16, base=8)
    trainable = [k for k in M.state(G0) if not k.startswith("bn_") and k != "frozen_flag"]
    assert all(torch.equal(M.state(G)[k], M.state(G0)[k]) for k in trainable)
    assert M.weights_equal(M.state(D), M.state(D0))
    assert report == []


def test_pretrain_is_deterministic_and_checkpoints(tiny_splits, tmp_path):
    cfg = replace(TINY, checkpoint_every=1)
    G1, _, r1 = gan.pretrain(tiny_splits["train"], cfg, checkpoint_dir=tmp_path)
    G2, _, r2 = gan.pretrain(tiny_splits["train"], cfg)
    assert M.weights_equal(M.generator_weights(G1), M.generator_weights(G2))
    assert [r["d_loss"] for r in r1] == [r["d_loss"] for r in r2]
    assert (tmp_path / "generator_e001.itgw").exists()
    assert all(math.isfinite(r["d_loss"]) and math.isfinite(r["g_loss"]) for r in r1)
    assert G1.frozen
    ckpt = M.generator_from_weights(M.load_weights(tmp_path / "generator_e001.itgw"))
    assert ckpt(torch.randn(8, 8), torch.arange(8) % 4).abs().max().item() < 1.0


def test_pretrain_reports_each_epoch(tiny_splits):
    seen = []
    _, _, report = gan.pretrain(tiny_splits["train"], replace(TINY, epochs=2, diff_augment=True), emit=seen.append)
    assert [r["epoch"] for r in report] == [1, 2] and seen == report


def test_pretrain_aborts_on_divergence(tiny_splits, monkeypatch):
    monkeypatch.setattr(gan, "d_loss_from_logits", lambda r, f: (r.mean() + f.mean()) * float("nan"))
    with pytest.raises(gan.GanDiverged):
        gan.pretrain(tiny_splits["train"], TINY)


def test_config_validation():
    with pytest.raises(ValueError):
        gan.GanTrainConfig(lr_g=0)
    with pytest.raises(ValueError):
        gan.GanTrainConfig(aux_weight=-1)
    with pytest.raises(ValueError):
        gan.GanTrainConfig(d_conditioning="film")
    with pytest.raises(ValueError):
        gan.pretrain(tiny_splits_empty(), TINY)


def tiny_splits_empty():
    import numpy as np

    from itgan.data import Dataset

    return Dataset(np.zeros((0, 16, 16, 1), np.uint8), np.zeros(0, np.int64), 4)


def test_sample_dataset_is_class_balanced(frozen_G):
    x, y = gan.sample_dataset(frozen_G, 3, seed=0)
    assert x.shape == (12, 1, 16, 16)
    assert torch.bincount(y).tolist() == [3, 3, 3, 3]
    assert torch.equal(gan.sample_dataset(frozen_G, 3, seed=0)[0], x)
