from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from itgan import augment as A
from itgan import tensor as T
from conftest import fd_check, rand

OMEGAS = [
    A.NONE,
    A.AugmentParams("flip-h"),
    A.AugmentParams("crop-shift", dx=2, dy=-1),
    A.AugmentParams("scale", scale=1.13),
    A.AugmentParams("rotate", angle_deg=11.0),
    A.AugmentParams("cutout", cx=7, cy=9),
    A.AugmentParams("brightness", delta=-0.2),
]


def test_sample_omega_deterministic():
    a = A.sample_omega(np.random.default_rng(3))
    b = A.sample_omega(np.random.default_rng(3))
    assert a == b


def test_sample_omega_uniform_over_kinds():
    rng = np.random.default_rng(0)
    n = 10_000
    counts = {k: 0 for k in A.KINDS}
    for _ in range(n):
        counts[A.sample_omega(rng).kind] += 1
    p = 1 / len(A.KINDS)
    sigma = math.sqrt(n * p * (1 - p))
    assert all(abs(c - n * p) <= 3 * sigma for c in counts.values())


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sample_omega_respects_ranges(seed):
    cfg = A.AugmentConfig()
    w = A.sample_omega(np.random.default_rng(seed), cfg)
    assert -2 <= w.dx <= 2 and -2 <= w.dy <= 2
    assert 0.8 <= w.scale <= 1.2
    assert -15.0 <= w.angle_deg <= 15.0
    assert -0.3 <= w.delta <= 0.3
    assert 0 <= w.cx < 16 and 0 <= w.cy < 16


def test_sample_omega_restricted_ops():
    cfg = A.AugmentConfig(ops=("flip-h",))
    assert all(A.sample_omega(np.random.default_rng(i), cfg).kind == "flip-h" for i in range(20))
    with pytest.raises(ValueError):
        A.AugmentConfig(ops=("warp",))


def test_none_is_identity():
    x = torch.randn(3, 1, 16, 16)
    assert torch.equal(A.apply(x, A.NONE), x)


def test_zero_rotation_is_identity():
    x = torch.randn(3, 1, 16, 16)
    assert (A.apply(x, A.AugmentParams("rotate", angle_deg=0.0)) - x).abs().max().item() <= 1e-6


def test_flip_is_involution():
    x = torch.randn(2, 1, 16, 16)
    w = A.AugmentParams("flip-h")
    assert torch.equal(A.apply(A.apply(x, w), w), x)


def test_cutout_interior_box_masks_one_sixteenth():
    x = torch.ones(1, 1, 16, 16)
    out = A.apply(x, A.AugmentParams("cutout", cx=8, cy=8))
    assert (out == 0).sum().item() / 256 == 1 / 16


def test_crop_shift_moves_pixels():
    x = torch.zeros(1, 1, 16, 16)
    x[0, 0, 5, 5] = 1.0
    out = A.apply(x, A.AugmentParams("crop-shift", dx=2, dy=-1))
    assert out[0, 0, 4, 7].item() == 1.0
    assert out.sum().item() == 1.0


@pytest.mark.parametrize("omega", OMEGAS, ids=lambda w: w.kind)
def test_apply_preserves_shape_and_is_pure(omega):
    x = torch.randn(4, 1, 16, 16)
    a, b = A.apply(x, omega), A.apply(x, omega)
    assert a.shape == x.shape
    assert torch.equal(a, b)


@pytest.mark.parametrize("omega", OMEGAS, ids=lambda w: w.kind)
def test_siamese_contract(omega):
    x = torch.randn(4, 1, 16, 16)
    r, s = A.siamese_apply(x, x.clone(), omega)
    assert torch.equal(r, s)


def test_siamese_shape_mismatch():
    with pytest.raises(T.ShapeError):
        A.siamese_apply(torch.zeros(2, 1, 16, 16), torch.zeros(2, 1, 8, 8), A.NONE)


@pytest.mark.parametrize("omega", OMEGAS, ids=lambda w: w.kind)
def test_apply_batch_equivariance(omega):
    x = torch.randn(4, 1, 16, 16)
    whole = A.apply(x, omega)
    parts = torch.cat([A.apply(x[i : i + 1], omega) for i in range(4)])
    assert torch.allclose(whole, parts, atol=1e-6)


@pytest.mark.parametrize("omega", OMEGAS, ids=lambda w: w.kind)
def test_apply_gradient_matches_finite_differences(f64, omega):
    x = rand(2, 1, 8, 8, seed=3)
    w = rand(2, 1, 8, 8, seed=4)
    # Cutout center scaled into the 8x8 image.
    if omega.kind == "cutout":
        omega = A.AugmentParams("cutout", cx=3, cy=4)
    assert fd_check(lambda: (A.apply(x, omega) * w).sum(), x) < 1e-5


@pytest.mark.parametrize(
    "omega, mapped",
    [(A.AugmentParams("flip-h"), 2 * 64), (A.AugmentParams("crop-shift", dx=1, dy=2), 2 * 7 * 6)],
    ids=["flip", "shift"],
)
def test_crop_flip_gradients_are_pixel_permutations(omega, mapped):
    x = torch.randn(2, 1, 8, 8, requires_grad=True)
    T.backward(A.apply(x, omega).sum())
    assert set(x.grad.unique().tolist()) <= {0.0, 1.0}
    assert x.grad.abs().sum().item() == mapped


def test_siamese_rotate_gradient_reaches_synth(f64):
    real = rand(2, 1, 8, 8, seed=1)
    synth = rand(2, 1, 8, 8, seed=2)
    w = rand(2, 1, 8, 8, seed=5)
    omega = A.AugmentParams("rotate", angle_deg=9.0)

    def loss():
        r, s = A.siamese_apply(real, synth, omega)
        return ((s - r) * w).sum()

    assert fd_check(loss, synth) < 1e-5
