from __future__ import annotations

import numpy as np
import pytest
import torch

from itgan import data as D
from itgan import models as M
from itgan import tensor as T


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def f64():
    with T.float64_mode():
        yield


@pytest.fixture(scope="session")
def tiny_dataset() -> D.Dataset:
    return D.gen_shapes(n_classes=4, per_class=24, size=16, seed=3)


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset):
    return D.split_dataset(tiny_dataset, seed=1)


def tiny_generator(seed: int = 0, n_classes: int = 4, frozen: bool = True) -> M.ConditionalGenerator:
    G = M.generator_init(seed, n_classes=n_classes, latent_dim=8, channels=1, image_size=16, base=16, embed_dim=4)
    return G.freeze(n_batches=2, batch=32, seed=seed) if frozen else G


def tiny_pool(train, val, count: int = 3) -> M.SnapshotPool:
    return M.pool_build(train, val, count=count, epochs=1, width=8, seed=0)


@pytest.fixture(scope="session")
def frozen_G():
    return tiny_generator()


@pytest.fixture(scope="session")
def pool(tiny_splits):
    return tiny_pool(tiny_splits["train"], tiny_splits["val"])


def rand(*shape, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


def fd_check(fn, x: torch.Tensor, h: float = 1e-3) -> float:
    """Relative error between autograd and central differences of scalar fn() w.r.t. x."""
    x.requires_grad_(True)
    x.grad = None
    out = fn()
    T.backward(out)
    analytic = x.grad.detach().clone()
    x.grad = None
    numeric = T.numeric_grad(fn, x, h)
    return T.relative_error(analytic, numeric)


def np_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


# Acceptance criterion number -> one-line PASS/FAIL verdict, filled by test_acceptance.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
