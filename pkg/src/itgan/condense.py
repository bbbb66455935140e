"""Learning informative latent vectors for a frozen generator.

Every iteration draws an embedder, per-class latent/real batches and one
augmentation per class, then takes an Adam step on the latents only, minimizing
``(1 - lam) * L_con + lam * R``:

* ``L_con``: squared distance between mean embeddings of a large real batch and
  of the generated batch, summed over classes (or, with ``objective="gradient"``,
  layerwise cosine distance between mean classifier gradients);
* ``R``: mean squared embedding distance between each latent's image and its
  paired real image.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment as A
from . import models as M
from . import tensor as T
from .data import Dataset
from .latents import LatentSet

log = logging.getLogger(__name__)

OBJECTIVES = ("distribution", "gradient")
SPLIT_STRATEGIES = ("fixed", "random")


class CondenseDiverged(FloatingPointError):
    pass


class PairingError(ValueError):
    pass


@dataclass(frozen=True)
class CondenseConfig:
    iterations: int = 5000
    lr: float = 0.001
    lam: float = 0.0
    objective: str = "distribution"
    batch_z: int = 64
    batch_real: int = 256
    embedder: object = "all"
    split_size: int | None = None
    split_strategy: str = "fixed"
    augment: A.AugmentConfig = A.AugmentConfig()
    width: int = 128
    seed: int = 0
    log_every: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_z < 1 or self.batch_real < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.split_strategy not in SPLIT_STRATEGIES:
            raise ValueError(f"split strategy must be one of {SPLIT_STRATEGIES}")
        if self.split_size is not None and self.split_size < 1:
            raise ValueError("split size must be >= 1")

    @property
    def embedder_tag(self) -> str:
        e = self.embedder
        return e if isinstance(e, str) else f"bin[{e[0]},{e[1]}]"


# ---------------------------------------------------------------------- losses


def total_loss(l_con, r, lam: float):
    """``(1 - lam) * l_con + lam * r``; a term whose weight is zero is dropped entirely."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if lam == 0.0:
        return l_con
    if lam == 1.0:
        return r
    return (1 - lam) * l_con + lam * r


def mean_embedding_distance(real_emb: Sequence[torch.Tensor], syn_emb: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over classes of |mean(real_c) - mean(syn_c)|^2."""
    terms = []
    for r, s in zip(real_emb, syn_emb, strict=True):
        if len(r) == 0 or len(s) == 0:
            raise ValueError("empty class batch")
        terms.append(((r.mean(0) - s.mean(0)) ** 2).sum())
    return torch.stack(terms).sum()


def paired_embedding_distance(real_emb: Sequence[torch.Tensor], syn_emb: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over classes of the mean over pairs of |real_i - syn_i|^2."""
    terms = []
    for r, s in zip(real_emb, syn_emb, strict=True):
        if r.shape != s.shape:
            raise PairingError(f"paired batches differ in shape: {tuple(r.shape)} vs {tuple(s.shape)}")
        terms.append(((r - s) ** 2).sum() / len(r))
    return torch.stack(terms).sum()


def _embed_per_class(psi: M.ConvNet, batches: Sequence[torch.Tensor], omegas: Sequence[A.AugmentParams]) -> list[torch.Tensor]:
    aug = [A.apply(b, w) for b, w in zip(batches, omegas, strict=True)]
    emb = psi.embed(torch.cat(aug))
    return list(torch.split(emb, [len(b) for b in batches]))


def con_loss(
    psi: M.ConvNet,
    reals: Sequence[torch.Tensor],
    latents: Sequence[torch.Tensor],
    G: M.ConditionalGenerator,
    omegas: Sequence[A.AugmentParams],
    classes: Sequence[int] | None = None,
) -> torch.Tensor:
    """Distribution-matching loss; ``reals[i]``/``latents[i]`` belong to class ``classes[i]``."""
    classes = list(range(len(reals))) if classes is None else list(classes)
    syn = _generate(G, latents, classes)
    with torch.no_grad():
        real_emb = _embed_per_class(psi, reals, omegas)
    return mean_embedding_distance(real_emb, _embed_per_class(psi, syn, omegas))


def reg_loss(
    psi: M.ConvNet,
    paired_reals: Sequence[torch.Tensor],
    paired_latents: Sequence[torch.Tensor],
    G: M.ConditionalGenerator,
    omegas: Sequence[A.AugmentParams],
    classes: Sequence[int] | None = None,
) -> torch.Tensor:
    classes = list(range(len(paired_reals))) if classes is None else list(classes)
    for r, z in zip(paired_reals, paired_latents, strict=True):
        if len(r) != len(z):
            raise PairingError(f"{len(r)} real images paired with {len(z)} latents")
    syn = _generate(G, paired_latents, classes)
    with torch.no_grad():
        real_emb = _embed_per_class(psi, paired_reals, omegas)
    return paired_embedding_distance(real_emb, _embed_per_class(psi, syn, omegas))


def _generate(G: M.ConditionalGenerator, latents: Sequence[torch.Tensor], classes: Sequence[int]) -> list[torch.Tensor]:
    y = torch.cat([torch.full((len(z),), c, dtype=torch.long) for z, c in zip(latents, classes)])
    images = G(torch.cat(list(latents)), y)
    return list(torch.split(images, [len(z) for z in latents]))


def gradient_distance(g_real: Sequence[torch.Tensor], g_syn: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of 1 - cos(g_real, g_syn); zero-norm layers are skipped with a warning."""
    total = None
    for i, (gr, gs) in enumerate(zip(g_real, g_syn, strict=True)):
        a, b = gr.flatten(), gs.flatten()
        na, nb = a.norm(), b.norm()
        if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
            log.warning("gradient matching: layer %d has a zero-norm gradient; skipped", i)
            continue
        term = 1 - (a * b).sum() / (na * nb)
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.get_default_dtype())
    return total


def grad_match_loss(
    net: torch.nn.Module,
    real: torch.Tensor,
    synth: torch.Tensor,
    y_real: torch.Tensor,
    y_synth: torch.Tensor,
) -> torch.Tensor:
    """Layerwise cosine distance between the mean cross-entropy gradients of ``net``'s
    parameters on the real and the synthetic batch; differentiable w.r.t. ``synth``.

    Only weight tensors take part. Biases and norm affines are skipped: a conv bias
    feeding instance norm has an identically zero gradient, whose float noise would
    make the cosine arbitrary.
    """
    params = [p for p in net.parameters() if p.dim() > 1]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    try:
        g_real = torch.autograd.grad(T.softmax_cross_entropy(net(real), y_real), params)
        g_real = [g.detach() for g in g_real]
        g_syn = torch.autograd.grad(T.softmax_cross_entropy(net(synth), y_synth), params, create_graph=True)
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
    return gradient_distance(g_real, g_syn)


# ------------------------------------------------------------------------ runs


@dataclass
class CondenseReport:
    records: list[dict] = field(default_factory=list)
    frozen_ok: bool = True
    labels_ok: bool = True
    wall_time: float = 0.0

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.records if r.get(key) is not None]


def weights_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _partition(pos: np.ndarray, size: int) -> list[np.ndarray]:
    n_groups = max(1, len(pos) // size)
    groups = [pos[g * size : (g + 1) * size] for g in range(n_groups)]
    # Last group takes the remainder.
    if n_groups * size < len(pos):
        groups[-1] = np.concatenate([groups[-1], pos[n_groups * size :]])
    return groups


@T.unchecked
def condense_run(
    G: M.ConditionalGenerator,
    pool: M.SnapshotPool | None,
    dataset: Dataset,
    z_init: LatentSet,
    cfg: CondenseConfig = CondenseConfig(),
    emit: Callable[[dict], None] | None = None,
    _random_groups: int | None = None,
) -> tuple[LatentSet, CondenseReport]:
    """Optimize the latents of ``z_init`` against ``dataset`` with ``G`` held fixed."""
    if z_init.provenance not in ("inverted", "random"):
        raise ValueError(f"cannot condense a {z_init.provenance!r} latent set")
    z_init.check_pairing(dataset)
    digest = weights_digest(G)
    g_flags = [p.requires_grad for p in G.parameters()]
    for p in G.parameters():
        p.requires_grad_(False)
    rng = np.random.default_rng(cfg.seed)
    arch = dict(pool.arch) if pool is not None else {}
    arch.setdefault("channels", dataset.image_shape[0])
    arch.setdefault("n_classes", dataset.n_classes)
    arch.setdefault("width", cfg.width)
    arch.setdefault("image_size", dataset.image_shape[1])
    size = dataset.image_shape[1]
    labels0, indices0 = z_init.labels.copy(), z_init.indices.copy()
    classes = [c for c in range(dataset.n_classes) if len(z_init.class_positions(c))]
    class_pos = {c: z_init.class_positions(c) for c in classes}
    real_pos = {c: dataset.class_indices(c) for c in classes}
    for c in classes:
        if len(real_pos[c]) == 0:
            raise ValueError(f"class {c} has latents but no real images")
    Z = z_init.z.clone().to(torch.get_default_dtype()).requires_grad_(True)
    opt = T.adam(cfg.lr)
    report = CondenseReport()
    t0 = time.perf_counter()
    try:
        for k in range(cfg.iterations):
            net = M.pool_sample(pool, cfg.embedder, rng, arch)
            need_head = cfg.objective == "gradient"
            for p in net.parameters():
                p.requires_grad_(False)
            omegas, groups, large, pair_real = [], [], [], []
            for c in classes:
                omegas.append(A.sample_omega(rng, cfg.augment, size))
                pos = class_pos[c]
                if _random_groups:
                    parts = _partition(rng.permutation(pos), max(len(pos) // _random_groups, 1))
                else:
                    parts = [pos]
                picked = []
                for part in parts:
                    bz = min(cfg.batch_z, len(part))
                    picked.append(np.sort(part[rng.choice(len(part), size=bz, replace=False)]))
                groups.append(picked)
                pool_c = real_pos[c]
                bl = min(cfg.batch_real, len(pool_c))
                large.append(np.sort(pool_c[rng.choice(len(pool_c), size=bl, replace=False)]))
            flat = [g for gs in groups for g in gs]
            flat_classes = [c for c, gs in zip(classes, groups) for _ in gs]
            flat_omegas = [w for w, gs in zip(omegas, groups) for _ in gs]
            syn = _generate(G, [Z[g] for g in flat], flat_classes)

            l_con = r = None
            if cfg.lam < 1.0:
                real_large = [dataset.images(large[classes.index(c)]) for c in flat_classes]
                if need_head:
                    terms = []
                    for xr, xs, c, w in zip(real_large, syn, flat_classes, flat_omegas):
                        yr = torch.full((len(xr),), c, dtype=torch.long)
                        ys = torch.full((len(xs),), c, dtype=torch.long)
                        terms.append(grad_match_loss(net, A.apply(xr, w), A.apply(xs, w), yr, ys))
                    l_con = torch.stack(terms).sum()
                else:
                    with torch.no_grad():
                        real_emb = _embed_per_class(net, real_large, flat_omegas)
                    l_con = mean_embedding_distance(real_emb, _embed_per_class(net, syn, flat_omegas))
            if cfg.lam > 0.0:
                paired = [dataset.images(z_init.indices[g]) for g in flat]
                with torch.no_grad():
                    real_emb = _embed_per_class(net, paired, flat_omegas)
                r = paired_embedding_distance(real_emb, _embed_per_class(net, syn, flat_omegas))
            loss = total_loss(l_con, r, cfg.lam)
            lv = float(loss.detach())
            if not math.isfinite(lv):
                raise CondenseDiverged(f"non-finite loss at iteration {k}")
            Z.grad = None
            T.backward(loss)
            T.adam_step([Z], [Z.grad], opt)
            if k % cfg.log_every == 0 or k == cfg.iterations - 1:
                rec = {
                    "stage": "condense",
                    "iter": k,
                    "L_con": None if l_con is None else float(l_con.detach()),
                    "R": None if r is None else float(r.detach()),
                    "L": lv,
                    "omega_kind": [w.kind for w in omegas],
                    "embedder_source": cfg.embedder_tag,
                }
                report.records.append(rec)
                if emit:
                    emit(rec)
    finally:
        for p, f in zip(G.parameters(), g_flags):
            p.requires_grad_(f)
    report.wall_time = time.perf_counter() - t0
    report.frozen_ok = weights_digest(G) == digest
    if not report.frozen_ok:
        raise AssertionError("generator weights changed during condensation")
    out = z_init.with_z(Z.detach().to(torch.float32) if cfg.iterations else z_init.z.clone(), "condensed")
    report.labels_ok = np.array_equal(out.labels, labels0) and np.array_equal(out.indices, indices0)
    if not report.labels_ok:
        raise AssertionError("condensation changed labels or correspondence")
    return out, report


def split_groups(z_init: LatentSet, size: int, seed: int) -> list[np.ndarray]:
    """Fixed split: per class, a seeded shuffle cut into groups of ``size`` (last takes the
    remainder); group g collects chunk g of every class. Returns latent positions."""
    rng = np.random.default_rng(seed)
    per_class = [_partition(rng.permutation(z_init.class_positions(c)), size) for c in range(z_init.n_classes)]
    n_groups = max(len(p) for p in per_class if len(p))
    out = []
    for g in range(n_groups):
        parts = [p[g] for p in per_class if g < len(p)]
        out.append(np.sort(np.concatenate(parts)))
    return out


def split_and_run(
    G: M.ConditionalGenerator,
    pool: M.SnapshotPool | None,
    dataset: Dataset,
    z_init: LatentSet,
    cfg: CondenseConfig,
    emit: Callable[[dict], None] | None = None,
) -> tuple[LatentSet, list[CondenseReport]]:
    """Latent-set ensemble: condense groups independently (fixed) or reshuffle group
    membership every iteration (random); the result keeps the input's ordering."""
    size = cfg.split_size
    per_class = min(len(z_init.class_positions(c)) for c in range(z_init.n_classes) if len(z_init.class_positions(c)))
    if size is None or size >= per_class:
        out, rep = condense_run(G, pool, dataset, z_init, cfg, emit)
        return out, [rep]
    if cfg.split_strategy == "random":
        out, rep = condense_run(G, pool, dataset, z_init, cfg, emit, _random_groups=per_class // size)
        return out, [rep]
    groups = split_groups(z_init, size, cfg.seed)
    z = z_init.z.clone()
    reports = []
    for g, pos in enumerate(groups):
        part, rep = condense_run(G, pool, dataset, z_init.take(pos), replace(cfg, seed=cfg.seed + 7919 * (g + 1)), emit)
        z[pos] = part.z
        reports.append(rep)
    return z_init.with_z(z, "condensed"), reports


def smoothed_progress(values: Sequence[float], frac: float = 0.1) -> tuple[float, float]:
    """Mean of the first and of the last ``frac`` of a loss trace."""
    n = max(1, int(round(len(values) * frac)))
    return float(np.mean(values[:n])), float(np.mean(values[-n:]))

