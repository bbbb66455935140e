"""Train-on-synthetic / test-on-real evaluation and the comparison and ablation drivers."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment as A
from . import models as M
from .condense import CondenseConfig, smoothed_progress, split_and_run
from .data import Dataset, from_images
from .inversion import InversionConfig, invert_all
from .latents import LatentSet, random_latents
from .training import Curves, FitConfig, TrainingDiverged, fit

log = logging.getLogger(__name__)

METHODS = ("real", "gan-random", "inversion", "itgan")


@dataclass(frozen=True)
class EvalConfig:
    arch: str = "convnet"
    epochs: int = 60
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 64
    augment: bool = True
    width: int = 128
    quantize: bool = False
    augment_cfg: A.AugmentConfig = A.AugmentConfig()

    def __post_init__(self) -> None:
        if self.epochs % 2:
            raise ValueError("eval epochs must be even (the learning rate drops at the half-way point)")
        if self.arch not in M.ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")

    def fit_config(self) -> FitConfig:
        return FitConfig(
            epochs=self.epochs,
            lr=self.lr,
            lr_decay_at=0.5,
            lr_decay=0.1,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch=self.batch,
            augment=self.augment,
            augment_cfg=self.augment_cfg,
        )


@dataclass
class Run:
    seed_latent: int
    seed_train: int
    test_acc: float
    epochs: int
    curves: dict = field(default_factory=dict)
    error: str | None = None


@dataclass
class ExperimentResult:
    method: str
    arch: str
    size_per_class: int
    runs: list[Run]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return [r.test_acc for r in self.runs if r.error is None]

    @property
    def mean(self) -> float:
        a = self.accuracies
        return float(np.mean(a)) if a else float("nan")

    @property
    def std(self) -> float:
        """Population standard deviation of the per-run accuracies."""
        a = self.accuracies
        return float(np.std(a)) if a else float("nan")

    def mean_curve(self) -> tuple[list[int], list[float]]:
        curves = [r.curves for r in self.runs if r.error is None and r.curves.get("test_acc")]
        if not curves:
            return [], []
        epochs = curves[0]["epoch"]
        return epochs, [float(np.mean([c["test_acc"][i] for c in curves])) for i in range(len(epochs))]

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["mean"] = self.mean
        d["std"] = self.std
        return d

    @classmethod
    def from_json(cls, d: dict) -> ExperimentResult:
        runs = [Run(**r) for r in d["runs"]]
        return cls(d["method"], d["arch"], d["size_per_class"], runs, d.get("config_hash", ""), d.get("extra", {}))


# ------------------------------------------------------------------ primitives


@dataclass
class SyntheticSet:
    images: torch.Tensor
    labels: torch.Tensor
    n_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def to_dataset(self) -> Dataset:
        return from_images(self.images, self.labels.numpy(), self.n_classes)


@torch.no_grad()
def materialize(G: M.ConditionalGenerator, Z: LatentSet, batch: int = 500) -> SyntheticSet:
    """Images ``G(z_i | y_i)`` with the latent labels, kept in float."""
    y = torch.from_numpy(Z.labels)
    z = Z.z.to(torch.get_default_dtype())
    parts = [G(z[i : i + batch], y[i : i + batch]) for i in range(0, len(z), batch)]
    images = torch.cat(parts) if parts else torch.zeros(0, G.channels, G.image_size, G.image_size)
    return SyntheticSet(images, y, Z.n_classes)


def train_classifier(
    x: torch.Tensor,
    y: torch.Tensor,
    test: Dataset,
    cfg: EvalConfig,
    seed: int,
    n_classes: int | None = None,
) -> tuple[torch.nn.Module, Curves]:
    """Train ``cfg.arch`` from scratch on (x, y) and track accuracy on the real test split."""
    if len(x) == 0:
        raise ValueError("empty training set")
    ch, h = x.shape[1], x.shape[2]
    net = M.build_classifier(cfg.arch, seed, ch, n_classes or test.n_classes, cfg.width, h)
    curves = fit(net, x, y, cfg.fit_config(), seed, test.images(), test.targets())
    return net, curves


def _train_inputs(synth: SyntheticSet, cfg: EvalConfig) -> tuple[torch.Tensor, torch.Tensor]:
    if cfg.quantize:
        ds = synth.to_dataset()
        return ds.images(), ds.targets()
    return synth.images, synth.labels


def evaluate_set(
    x: torch.Tensor,
    y: torch.Tensor,
    test: Dataset,
    cfg: EvalConfig,
    train_seeds: Sequence[int],
    seed_latent: int,
) -> list[Run]:
    runs = []
    for ts in train_seeds:
        try:
            _, curves = train_classifier(x, y, test, cfg, ts)
            runs.append(Run(seed_latent, ts, curves.final_test_acc, cfg.epochs, curves.as_dict()))
        except (TrainingDiverged, FloatingPointError) as exc:
            runs.append(Run(seed_latent, ts, float("nan"), cfg.epochs, {}, error=str(exc)))
    return runs


def _hash(*cfgs) -> str:
    from .config import config_hash

    return config_hash([dataclasses.asdict(c) for c in cfgs])


# ----------------------------------------------------------------- comparisons


def inversion_extractor(pool: M.SnapshotPool) -> M.ConvNet:
    """The fixed perceptual feature extractor: best snapshot of the top accuracy bin."""
    top = pool.top_bin()
    return pool.net(max(top, key=lambda i: (pool.snapshots[i].val_acc, -i)))


def compare_methods(
    G: M.ConditionalGenerator,
    pool: M.SnapshotPool,
    train: Dataset,
    test: Dataset,
    sizes: Sequence[int],
    latent_seeds: Sequence[int],
    train_seeds: Sequence[int],
    inv_cfg: InversionConfig = InversionConfig(),
    cond_cfg: CondenseConfig = CondenseConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    methods: Sequence[str] = METHODS,
    emit: Callable[[dict], None] | None = None,
) -> list[ExperimentResult]:
    """gan-random, inversion and itgan latent sets per (size, latent seed), each trained
    on with every train seed; plus the real-data upper bound on the full training split."""
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}")
    psi = inversion_extractor(pool)
    results: list[ExperimentResult] = []
    if "real" in methods:
        runs = evaluate_set(train.images(), train.targets(), test, eval_cfg, train_seeds, -1)
        per_class = int(np.bincount(train.labels).max())
        results.append(ExperimentResult("real", eval_cfg.arch, per_class, runs, _hash(eval_cfg)))
        _emit(emit, results[-1])
    for size in sizes:
        by_method: dict[str, ExperimentResult] = {}
        for m in methods:
            if m == "real":
                continue
            cfgs = {"gan-random": (eval_cfg,), "inversion": (inv_cfg, eval_cfg), "itgan": (inv_cfg, cond_cfg, eval_cfg)}[m]
            by_method[m] = ExperimentResult(m, eval_cfg.arch, size, [], _hash(*cfgs))
        for ls in latent_seeds:
            sets: dict[str, LatentSet] = {}
            if "gan-random" in by_method:
                sets["gan-random"] = random_latents(train, size, G.latent_dim, ls)
            if "inversion" in by_method or "itgan" in by_method:
                t0 = time.perf_counter()
                inv_report: list[dict] = []
                inverted = invert_all(G, psi, train, replace(inv_cfg, seed=ls), per_class=size, report=inv_report)
                if "inversion" in by_method:
                    sets["inversion"] = inverted
                    by_method["inversion"].extra.setdefault("inversion_seconds", []).append(time.perf_counter() - t0)
            if "itgan" in by_method:
                t0 = time.perf_counter()
                condensed, reports = split_and_run(G, pool, train, inverted, replace(cond_cfg, seed=ls))
                trace = [r["L_con"] for rep in reports for r in rep.records if r["L_con"] is not None]
                extra = by_method["itgan"].extra
                extra.setdefault("L_con_trace", []).append(trace)
                extra.setdefault("frozen_ok", []).append(all(r.frozen_ok for r in reports))
                extra.setdefault("labels_ok", []).append(all(r.labels_ok for r in reports))
                extra.setdefault("condense_seconds", []).append(time.perf_counter() - t0)
                sets["itgan"] = condensed
            for m, zs in sets.items():
                x, y = _train_inputs(materialize(G, zs), eval_cfg)
                by_method[m].runs.extend(evaluate_set(x, y, test, eval_cfg, train_seeds, ls))
                log.info("size %d seed %d %s: %s", size, ls, m, [round(r.test_acc, 4) for r in by_method[m].runs[-len(train_seeds):]])
        for res in by_method.values():
            results.append(res)
            _emit(emit, res)
    return results


def _emit(emit, res: ExperimentResult) -> None:
    if emit:
        emit({"stage": "eval", "method": res.method, "arch": res.arch, "size_per_class": res.size_per_class, "mean": res.mean, "std": res.std})


def cross_arch_eval(
    G: M.ConditionalGenerator,
    Z: LatentSet,
    test: Dataset,
    archs: Sequence[str],
    cfg: EvalConfig,
    train_seeds: Sequence[int],
    seed_latent: int = 0,
) -> list[ExperimentResult]:
    x, y = _train_inputs(materialize(G, Z), cfg)
    size = int(np.bincount(Z.labels).max()) if len(Z) else 0
    out = []
    for arch in archs:
        c = replace(cfg, arch=arch)
        out.append(ExperimentResult("itgan", arch, size, evaluate_set(x, y, test, c, train_seeds, seed_latent), _hash(c)))
    return out


# -------------------------------------------------------------------- ablations


@dataclass
class AblationSettings:
    per_class: int = 50
    splits: tuple[int, ...] = (1, 2, 4, 5)
    lambdas: tuple[float, ...] = (0.0, 0.001, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
    latent_seeds: tuple[int, ...] = (0, 1, 2)
    train_seeds: tuple[int, ...] = (0,)
    slack: float = 0.005
    comparability: float = 0.02


def _curve_mean(res: ExperimentResult) -> float:
    return res.mean


def ablation_suite(
    G: M.ConditionalGenerator,
    pool: M.SnapshotPool,
    train: Dataset,
    test: Dataset,
    settings: AblationSettings = AblationSettings(),
    inv_cfg: InversionConfig = InversionConfig(),
    cond_cfg: CondenseConfig = CondenseConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    emit: Callable[[dict], None] | None = None,
) -> dict:
    """Objective, split size, split strategy x lambda and embedder-source ablations.

    Every condition condenses the same inverted initialization per latent seed;
    failures are recorded and the suite carries on. Returns a report with per
    condition results and a trend summary.
    """
    psi = inversion_extractor(pool)
    n = settings.per_class
    inits = {
        ls: invert_all(G, psi, train, replace(inv_cfg, seed=ls), per_class=n) for ls in settings.latent_seeds
    }
    conditions: dict[str, dict] = {}
    done: dict[str, str] = {}

    def run(name: str, cfg: CondenseConfig) -> None:
        res = ExperimentResult("itgan", eval_cfg.arch, n, [], _hash(inv_cfg, cfg, eval_cfg))
        if res.config_hash in done:
            # Several tables share a configuration (e.g. the finest split at lambda 0).
            conditions[name] = {**conditions[done[res.config_hash]], "same_as": done[res.config_hash]}
        else:
            done[res.config_hash] = name
            _run_condition(name, cfg, res)
        if emit:
            emit({"stage": "ablate", "condition": name, "mean": conditions[name]["mean"], "ok": conditions[name]["ok"]})

    def _run_condition(name: str, cfg: CondenseConfig, res: ExperimentResult) -> None:
        try:
            for ls in settings.latent_seeds:
                z, _ = split_and_run(G, pool, train, inits[ls], replace(cfg, seed=ls))
                x, y = _train_inputs(materialize(G, z), eval_cfg)
                res.runs.extend(evaluate_set(x, y, test, eval_cfg, settings.train_seeds, ls))
            conditions[name] = {"ok": True, "result": res.to_json(), "mean": res.mean, "std": res.std}
        except Exception as exc:  # noqa: BLE001 - the suite must survive a failing condition
            log.exception("ablation condition %s failed", name)
            conditions[name] = {"ok": False, "error": f"{type(exc).__name__}: {exc}", "mean": float("nan")}

    base = replace(cond_cfg, lam=0.0, split_size=None, split_strategy="fixed")
    # (a) matching objective, random-init embedders as in the reference ablation
    run("objective=distribution", replace(base, objective="distribution", embedder="random-init"))
    run("objective=gradient", replace(base, objective="gradient", embedder="random-init"))
    # (b) split size, lambda 0
    for k in settings.splits:
        run(f"split={k}x{n // k}", replace(base, split_size=None if k == 1 else n // k))
    # (c) fixed vs random splitting over the lambda grid, with the finest split
    k_split = max(settings.splits)
    for lam in settings.lambdas:
        for strategy in ("fixed", "random"):
            run(f"strategy={strategy},lambda={lam:g}", replace(base, lam=float(lam), split_size=n // k_split, split_strategy=strategy))
    # (d) embedder source
    for source in ("random-init", "top", "all"):
        run(f"embedder={source}", replace(base, embedder=source))

    def mean_of(name: str) -> float:
        c = conditions.get(name)
        return c["mean"] if c and c["ok"] else float("nan")

    s = settings.slack
    biggest, smallest = f"split=1x{n}", f"split={k_split}x{n // k_split}"
    trends = {
        "split_size": _trend(mean_of(biggest) >= mean_of(smallest) - s, mean_of(biggest), mean_of(smallest)),
        "fixed_vs_random": _trend(
            mean_of("strategy=fixed,lambda=0") >= mean_of("strategy=random,lambda=0") - s,
            mean_of("strategy=fixed,lambda=0"),
            mean_of("strategy=random,lambda=0"),
        ),
        "top_bin_vs_random_init": _trend(
            mean_of("embedder=top") >= mean_of("embedder=random-init") - s,
            mean_of("embedder=top"),
            mean_of("embedder=random-init"),
        ),
        "distribution_vs_gradient": _trend(
            abs(mean_of("objective=distribution") - mean_of("objective=gradient")) <= settings.comparability,
            mean_of("objective=distribution"),
            mean_of("objective=gradient"),
        ),
    }
    return {
        "stage": "ablate",
        "settings": dataclasses.asdict(settings),
        "conditions": conditions,
        "trends": trends,
        "trends_passed": sum(t["passed"] for t in trends.values()),
        "completed": True,
    }


def _trend(ok: bool, a: float, b: float) -> dict:
    valid = not (math.isnan(a) or math.isnan(b))
    return {"passed": bool(ok and valid), "a": a, "b": b}


def results_json(results: Sequence[ExperimentResult]) -> str:
    return json.dumps([r.to_json() for r in results], sort_keys=True, indent=1)


__all__ = [
    "EvalConfig",
    "ExperimentResult",
    "Run",
    "SyntheticSet",
    "materialize",
    "train_classifier",
    "compare_methods",
    "cross_arch_eval",
    "ablation_suite",
    "AblationSettings",
    "smoothed_progress",
]
