"""Command-line pipeline: one stage per subcommand, artifacts under a run directory.

Layout of a run directory::

    dataset/{train,val,test}.itgd
    gan/generator.itgw  gan/discriminator.itgw
    pool/pool.itgw
    invert/latents_s{seed}.itgz
    condense/latents_s{seed}.itgz
    eval/summary.csv  eval/curves.csv  eval/results.json  eval/summary.json
    ablate/summary.json
    report/*.csv

Every stage directory also holds ``config.json``, ``config.sha256``, ``inputs.json``
(content hashes of consumed artifacts), ``report.jsonl`` and ``timings.jsonl``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import data as D
from . import gan
from . import models as M
from . import report as R
from . import tensor as T
from .condense import CondenseDiverged, smoothed_progress, split_and_run
from .config import ConfigError, RunConfig
from .evaluate import (
    METHODS,
    AblationSettings,
    ExperimentResult,
    Run,
    ablation_suite,
    evaluate_set,
    inversion_extractor,
    materialize,
    _train_inputs,
)
from .inversion import invert_all
from .latents import LatentFormatError, load_latents, random_latents, save_latents
from .training import TrainingDiverged

log = logging.getLogger("itgan")

EXIT_OK, EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4
STAGES = ("dataset-gen", "gan-pretrain", "pool-build", "invert", "condense", "eval", "ablate", "report")
_DIRS = {"dataset-gen": "dataset", "gan-pretrain": "gan", "pool-build": "pool"}


class MissingInput(FileNotFoundError):
    pass


class StageExists(RuntimeError):
    pass


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Stage:
    """A stage's output directory plus its config copy, input hashes and event streams."""

    def __init__(self, run_dir: Path, name: str, cfg: RunConfig, force: bool = False):
        self.run_dir = run_dir
        self.dir = run_dir / _DIRS.get(name, name)
        if (self.dir / "config.json").exists() and not force:
            raise StageExists(f"{self.dir} already holds a completed stage; pass --force to redo it")
        if self.dir.exists():
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        self.cfg = cfg
        self.events = R.JsonLines(self.dir / "report.jsonl")
        self.timings = R.JsonLines(self.dir / "timings.jsonl")
        self.inputs: dict[str, str] = {}
        self.t0 = time.perf_counter()

    def need(self, path: str | Path | None, default: Path) -> Path:
        p = Path(path) if path else default
        if not p.is_file():
            raise MissingInput(str(p))
        # Run-relative keys keep inputs.json identical across run directories.
        try:
            key = p.resolve().relative_to(self.run_dir.resolve()).as_posix()
        except ValueError:
            key = str(p)
        self.inputs[key] = file_sha256(p)
        return p

    def emit(self, record: dict[str, Any]) -> None:
        # Wall-clock values are kept out of report.jsonl so reports stay reproducible.
        rec = dict(record)
        wall = rec.pop("wall_time", None)
        self.events(rec)
        if wall is not None:
            self.timings({"stage": rec.get("stage"), "wall_time": wall})

    def finish(self, summary: dict[str, Any] | None = None) -> None:
        self.timings({"stage": "total", "wall_time": time.perf_counter() - self.t0})
        (self.dir / "inputs.json").write_text(json.dumps(self.inputs, sort_keys=True, indent=1) + "\n")
        if summary is not None:
            self.events({"event": "summary", **summary})
        (self.dir / "config.json").write_text(self.cfg.canonical_json() + "\n")
        (self.dir / "config.sha256").write_text(self.cfg.hash + "\n")


# ------------------------------------------------------------------- loaders


def _dataset(stage: Stage, split: str, path: str | None = None) -> D.Dataset:
    return D.load_dataset(stage.need(path, stage.run_dir / "dataset" / f"{split}.itgd"), split)


def _generator(stage: Stage, path: str | None = None) -> M.ConditionalGenerator:
    G = M.generator_from_weights(M.load_weights(stage.need(path, stage.run_dir / "gan" / "generator.itgw")))
    if not G.frozen:
        raise ConfigError("generator checkpoint is not frozen; use the final gan/generator.itgw")
    return G


def _pool(stage: Stage, path: str | None = None) -> M.SnapshotPool:
    return M.load_pool(stage.need(path, stage.run_dir / "pool" / "pool.itgw"))


def _latent_seeds(cfg: RunConfig) -> list[int]:
    return [cfg["seed"] + i for i in range(cfg["eval.latent_seeds"])]


def _train_seeds(cfg: RunConfig) -> list[int]:
    return [cfg["seed"] + 100 + j for j in range(cfg["eval.train_seeds"])]


# -------------------------------------------------------------------- stages


def cmd_dataset_gen(stage: Stage, args) -> dict:
    c = stage.cfg
    ds = D.gen_shapes(c["data.n_classes"], c["data.per_class"], c["data.size"], c["data.channels"], c["data.seed"])
    splits = D.split_dataset(ds, seed=c["data.seed"])
    for name, part in splits.items():
        D.save_dataset(part, stage.dir / f"{name}.itgd")
    return {"stage": "dataset-gen", "sizes": {k: len(v) for k, v in splits.items()}}


def cmd_gan_pretrain(stage: Stage, args) -> dict:
    c = stage.cfg
    train, val = _dataset(stage, "train", args.dataset), _dataset(stage, "val")
    ckpt = stage.dir / "checkpoints"
    ckpt.mkdir()
    G, Dn, _ = gan.pretrain(train, c.gan(), checkpoint_dir=ckpt, emit=stage.emit)
    M.save_weights(M.generator_weights(G), stage.dir / "generator.itgw")
    M.save_weights(M.discriminator_weights(Dn), stage.dir / "discriminator.itgw")
    acc = gan.sanity_gate(G, val, c["gan.gate_per_class"], c["gan.gate_epochs"], c["model.width"], c["seed"])
    chance = 1.0 / train.n_classes
    if acc <= 2 * chance:
        log.warning("generator sanity gate failed: %.3f <= %.3f", acc, 2 * chance)
    return {"stage": "gan-pretrain", "gate_acc": acc, "gate_passed": acc > 2 * chance}


def cmd_pool_build(stage: Stage, args) -> dict:
    c = stage.cfg
    train, val = _dataset(stage, "train", args.dataset), _dataset(stage, "val")
    pool = M.pool_build(train, val, c["pool.count"], epochs=c["pool.epochs"], width=c["model.width"], seed=c["seed"])
    M.save_pool(pool, stage.dir / "pool.itgw")
    accs = [s.val_acc for s in pool.snapshots]
    for i, a in enumerate(accs):
        stage.emit({"stage": "pool-build", "snapshot": i, "val_acc": a, "bin": pool.bin_of(a)})
    return {"stage": "pool-build", "count": len(accs), "top_val_acc": max(accs)}


def cmd_invert(stage: Stage, args) -> dict:
    c = stage.cfg
    train, G, pool = _dataset(stage, "train", args.dataset), _generator(stage, args.generator), _pool(stage, args.pool)
    psi = inversion_extractor(pool)
    medians = {}
    for ls in _latent_seeds(c):
        rep: list[dict] = []
        Z = invert_all(G, psi, train, c.inversion(ls), per_class=c["invert.per_class"], report=rep)
        for r in rep:
            stage.emit({**r, "seed_latent": ls})
        save_latents(Z, stage.dir / f"latents_s{ls}.itgz")
        medians[ls] = (float(np.median([r["initial_median"] for r in rep])), float(np.median([r["final_median"] for r in rep])))
    return {"stage": "invert", "objective_medians": {str(k): v for k, v in medians.items()}}


def cmd_condense(stage: Stage, args) -> dict:
    c = stage.cfg
    train, G, pool = _dataset(stage, "train", args.dataset), _generator(stage, args.generator), _pool(stage, args.pool)
    progress = {}
    for ls in _latent_seeds(c):
        init = load_latents(stage.need(args.init if args.init else None, stage.run_dir / "invert" / f"latents_s{ls}.itgz"))
        Z, reports = split_and_run(G, pool, train, init, c.condense(ls), lambda r: stage.emit({**r, "seed_latent": ls}))
        save_latents(Z, stage.dir / f"latents_s{ls}.itgz")
        stage.timings({"stage": "condense", "seed_latent": ls, "wall_time": sum(r.wall_time for r in reports)})
        trace = [r["L_con"] for rep in reports for r in rep.records if r["L_con"] is not None]
        progress[str(ls)] = smoothed_progress(trace) if trace else None
        if args.init:
            break
    return {"stage": "condense", "L_con_first_last": progress}


def cmd_eval(stage: Stage, args) -> dict:
    c = stage.cfg
    train, test = _dataset(stage, "train", args.dataset), _dataset(stage, "test")
    methods = [m.strip() for m in c["eval.methods"].split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown eval methods {bad}")
    archs = [a.strip() for a in c["eval.archs"].split(",") if a.strip()]
    G = _generator(stage, args.generator) if set(methods) - {"real"} else None
    base = c.eval()
    results: list[ExperimentResult] = []
    for arch in archs:
        ecfg = replace(base, arch=arch)
        from .evaluate import _hash

        if "real" in methods:
            runs = evaluate_set(train.images(), train.targets(), test, ecfg, _train_seeds(c), -1)
            results.append(ExperimentResult("real", arch, int(train.class_counts().max()), runs, _hash(ecfg)))
        for m in methods:
            if m == "real":
                continue
            res = ExperimentResult(m, arch, c["invert.per_class"], [], _hash(ecfg))
            for ls in _latent_seeds(c):
                if m == "gan-random":
                    Z = random_latents(train, c["invert.per_class"], G.latent_dim, ls)
                else:
                    sub = "invert" if m == "inversion" else "condense"
                    Z = load_latents(stage.need(None, stage.run_dir / sub / f"latents_s{ls}.itgz"))
                x, y = _train_inputs(materialize(G, Z), ecfg)
                res.runs.extend(evaluate_set(x, y, test, ecfg, _train_seeds(c), ls))
            results.append(res)
    flat = []
    for res in results:
        for r in res.runs:
            rec = {"event": "run", "stage": "eval", "method": res.method, "arch": res.arch,
                   "size_per_class": res.size_per_class, "seed_latent": r.seed_latent, "seed_train": r.seed_train,
                   "test_acc": r.test_acc, "epochs": r.epochs, "curves": r.curves, "error": r.error,
                   "config_hash": res.config_hash}
            stage.emit(rec)
            flat.append(rec)
    (stage.dir / "summary.csv").write_text(R.summary_csv(flat))
    (stage.dir / "curves.csv").write_text(R.curves_csv(flat))
    (stage.dir / "results.json").write_text(json.dumps([r.to_json() for r in results], sort_keys=True, indent=1) + "\n")
    agg = R.aggregate(flat)
    (stage.dir / "summary.json").write_text(json.dumps({"aggregates": agg}, sort_keys=True, indent=1) + "\n")
    return {"stage": "eval", "aggregates": agg}


def cmd_ablate(stage: Stage, args) -> dict:
    c = stage.cfg
    train, test = _dataset(stage, "train", args.dataset), _dataset(stage, "test")
    G, pool = _generator(stage, args.generator), _pool(stage, args.pool)
    settings = AblationSettings(
        per_class=c["ablate.per_class"],
        splits=tuple(int(s) for s in c["ablate.splits"].split(",")),
        lambdas=tuple(float(s) for s in c["ablate.lambdas"].split(",")),
        latent_seeds=tuple(c["seed"] + i for i in range(c["ablate.seeds"])),
        train_seeds=tuple(c["seed"] + 100 + j for j in range(c["ablate.train_seeds"])),
    )
    out = ablation_suite(G, pool, train, test, settings, c.inversion(), c.condense(), c.eval(), emit=stage.emit)
    (stage.dir / "summary.json").write_text(json.dumps(out, sort_keys=True, indent=1) + "\n")
    return {"stage": "ablate", "trends": out["trends"], "trends_passed": out["trends_passed"]}


def cmd_report(stage: Stage, args) -> dict:
    files = R.render(stage.run_dir)
    check = json.loads(files["summary"].read_text())["consistency"]
    return {"stage": "report", "files": sorted(p.name for p in files.values()), "consistency": check}


COMMANDS: dict[str, Callable] = {
    "dataset-gen": cmd_dataset_gen,
    "gan-pretrain": cmd_gan_pretrain,
    "pool-build": cmd_pool_build,
    "invert": cmd_invert,
    "condense": cmd_condense,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------- main


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for it in items:
        if "=" not in it:
            raise ConfigError(f"--set expects key=value, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itgan", description="Latent-set condensation with a frozen conditional GAN.")
    p.add_argument("--run", help="run directory (default: $ITGAN_RUNS/default or ./runs/default)")
    p.add_argument("--preset", choices=["paper", "desk", "fast", "smoke"], default=None)
    p.add_argument("--config", help="JSON file of dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="global seed (same as --set seed=N)")
    p.add_argument("--force", action="store_true", help="replace an already completed stage")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sp = sub.add_parser(name)
        if name not in ("dataset-gen", "report"):
            sp.add_argument("--dataset", help="training split (.itgd) to use instead of the run's")
        if name in ("invert", "condense", "eval", "ablate"):
            sp.add_argument("--generator", help="frozen generator (.itgw)")
        if name in ("invert", "condense", "ablate"):
            sp.add_argument("--pool", help="snapshot pool (.itgw)")
        if name == "condense":
            sp.add_argument("--init", help="initial latent set (.itgz); condenses only this file")
    return p


def run_dir_for(arg: str | None) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get("ITGAN_RUNS", "runs")) / "default"


def _fail(code: int, exc: BaseException, **extra: Any) -> int:
    doc = {"ok": False, "exit_code": code, "error": type(exc).__name__, "message": str(exc), **extra}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = RunConfig.build(args.preset, args.config, overrides)
        T.set_deterministic(cfg["seed"], cfg["deterministic"])
        # report only derives files from other stages, so it may always be redone
        stage = Stage(run_dir_for(args.run), args.command, cfg, args.force or args.command == "report")
        summary = COMMANDS[args.command](stage, args)
        stage.finish(summary)
    except (MissingInput, FileNotFoundError) as exc:
        path = getattr(exc, "filename", None) or (exc.args[0] if exc.args else "")
        return _fail(EXIT_MISSING, exc, path=str(path))
    except (ConfigError, StageExists) as exc:
        return _fail(EXIT_CONFIG, exc)
    except (TrainingDiverged, CondenseDiverged, gan.GanDiverged, T.NonFiniteError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (D.DatasetFormatError, M.WeightsFormatError, LatentFormatError, R.ReportError) as exc:
        return _fail(EXIT_MISSING, exc)
    print(json.dumps({"ok": True, **summary}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
