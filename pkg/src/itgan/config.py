"""Flat dotted-key run configuration, presets and stable content hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

from . import augment as A
from .condense import CondenseConfig
from .evaluate import EvalConfig
from .gan import GanTrainConfig
from .inversion import InversionConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "deterministic": True,
    "data.n_classes": 10,
    "data.per_class": 500,
    "data.size": 16,
    "data.channels": 1,
    "data.seed": 0,
    "model.width": 128,
    "model.latent_dim": 64,
    "gan.epochs": 30,
    "gan.batch": 64,
    "gan.lr_g": 1e-4,
    "gan.lr_d": 4e-4,
    "gan.g_base": 128,
    "gan.d_base": 64,
    "gan.checkpoint_every": 10,
    "gan.diff_augment": False,
    "gan.aux_weight": 0.0,
    "gan.d_conditioning": "planes",
    "gan.gate_per_class": 500,
    "gan.gate_epochs": 4,
    "pool.count": 16,
    "pool.epochs": 3,
    "invert.steps": 400,
    "invert.lr": 0.05,
    "invert.lambda_pixel": 1.0,
    "invert.restarts": 2,
    "invert.batch": 64,
    "invert.per_class": 50,
    "condense.iterations": 5000,
    "condense.lr": 0.001,
    "condense.lambda": 0.0,
    "condense.objective": "distribution",
    "condense.batch_z": 64,
    "condense.batch_real": 256,
    "condense.embedder": "all",
    "condense.split_size": 0,
    "condense.split_strategy": "fixed",
    "augment.ops": ",".join(A.DEFAULT_OPS),
    "augment.shift_px": 2,
    "augment.rotate_deg": 15.0,
    "augment.scale_min": 0.8,
    "augment.scale_max": 1.2,
    "augment.cutout_frac": 0.25,
    "augment.brightness": 0.3,
    "eval.arch": "convnet",
    "eval.epochs": 60,
    "eval.lr": 0.01,
    "eval.momentum": 0.9,
    "eval.batch": 64,
    "eval.augment": True,
    "eval.train_seeds": 3,
    "eval.latent_seeds": 3,
    "eval.archs": "convnet",
    "eval.quantize": False,
    "eval.methods": "real,gan-random,inversion,itgan",
    "ablate.per_class": 50,
    "ablate.splits": "1,2,4,5",
    "ablate.lambdas": "0,0.001,0.01,0.02,0.05,0.1,0.2,0.5,1",
    "ablate.seeds": 3,
    "ablate.train_seeds": 1,
}

PRESETS: dict[str, dict[str, Any]] = {
    # Paper-scale schedule lengths.
    "paper": {"eval.epochs": 200, "model.latent_dim": 128},
    # Spec desk defaults are DEFAULTS themselves.
    "desk": {},
    # Narrower nets and shorter schedules sized for a single CPU core.
    "fast": {
        "model.width": 32,
        "gan.epochs": 16,
        "gan.g_base": 64,
        "gan.gate_per_class": 200,
        "pool.count": 8,
        "pool.epochs": 3,
        "invert.steps": 200,
        "invert.restarts": 1,
        "condense.iterations": 200,
        "condense.lr": 0.03,
        "condense.batch_real": 128,
        "eval.epochs": 30,
    },
    # Minutes-long end-to-end smoke run.
    "smoke": {
        "data.per_class": 40,
        "model.width": 16,
        "gan.epochs": 2,
        "gan.g_base": 32,
        "gan.d_base": 16,
        "gan.checkpoint_every": 1,
        "gan.gate_per_class": 20,
        "gan.gate_epochs": 1,
        "pool.count": 3,
        "pool.epochs": 2,
        "invert.steps": 10,
        "invert.restarts": 1,
        "invert.per_class": 8,
        "condense.iterations": 5,
        "condense.batch_real": 16,
        "eval.epochs": 2,
        "eval.train_seeds": 1,
        "eval.latent_seeds": 1,
        "ablate.per_class": 8,
        "ablate.splits": "1,2",
        "ablate.lambdas": "0,0.5",
        "ablate.seeds": 1,
    },
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            return int(text) if isinstance(default, int) else float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from exc
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if type(value) is not type(default):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


@dataclasses.dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def build(
        cls,
        preset: str | None = None,
        file: str | Path | None = None,
        overrides: dict[str, Any] | None = None,
    ) -> RunConfig:
        """Defaults, then preset, then config file, then overrides (flags win)."""
        values = dict(DEFAULTS)
        layers: list[dict[str, Any]] = []
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            layers.append(PRESETS[preset])
        if file:
            try:
                layers.append(json.loads(Path(file).read_text()))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{file}: invalid JSON ({exc})") from exc
        if overrides:
            layers.append(overrides)
        for layer in layers:
            for k, v in layer.items():
                if k not in DEFAULTS:
                    raise ConfigError(f"unknown config key {k!r}")
                values[k] = _coerce(k, v)
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def validate(self) -> None:
        v = self.values
        if not 0.0 <= v["condense.lambda"] <= 1.0:
            raise ConfigError("condense.lambda must be in [0, 1]")
        if v["eval.epochs"] % 2:
            raise ConfigError("eval.epochs must be even")
        try:
            self.augment()
            self.condense()
            self.inversion()
            self.gan()
            self.eval()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def canonical_json(self) -> str:
        return canonical_json(self.values)

    @property
    def hash(self) -> str:
        return sha256_text(self.canonical_json())

    def augment(self) -> A.AugmentConfig:
        v = self.values
        return A.AugmentConfig(
            ops=tuple(s.strip() for s in v["augment.ops"].split(",") if s.strip()),
            shift_px=v["augment.shift_px"],
            scale_range=(v["augment.scale_min"], v["augment.scale_max"]),
            rotate_deg=v["augment.rotate_deg"],
            cutout_frac=v["augment.cutout_frac"],
            brightness=v["augment.brightness"],
        )

    def gan(self) -> GanTrainConfig:
        v = self.values
        return GanTrainConfig(
            epochs=v["gan.epochs"],
            batch=v["gan.batch"],
            lr_g=v["gan.lr_g"],
            lr_d=v["gan.lr_d"],
            latent_dim=v["model.latent_dim"],
            g_base=v["gan.g_base"],
            d_base=v["gan.d_base"],
            seed=v["seed"],
            checkpoint_every=v["gan.checkpoint_every"],
            diff_augment=v["gan.diff_augment"],
            aux_weight=v["gan.aux_weight"],
            d_conditioning=v["gan.d_conditioning"],
        )

    def inversion(self, seed: int | None = None) -> InversionConfig:
        v = self.values
        return InversionConfig(
            steps=v["invert.steps"],
            lr=v["invert.lr"],
            lam_pixel=v["invert.lambda_pixel"],
            restarts=v["invert.restarts"],
            batch=v["invert.batch"],
            seed=v["seed"] if seed is None else seed,
        )

    def condense(self, seed: int | None = None) -> CondenseConfig:
        v = self.values
        return CondenseConfig(
            iterations=v["condense.iterations"],
            lr=v["condense.lr"],
            lam=v["condense.lambda"],
            objective=v["condense.objective"],
            batch_z=v["condense.batch_z"],
            batch_real=v["condense.batch_real"],
            embedder=parse_embedder(v["condense.embedder"]),
            split_size=v["condense.split_size"] or None,
            split_strategy=v["condense.split_strategy"],
            augment=self.augment(),
            width=v["model.width"],
            seed=v["seed"] if seed is None else seed,
        )

    def eval(self) -> EvalConfig:
        v = self.values
        return EvalConfig(
            arch=v["eval.arch"],
            epochs=v["eval.epochs"],
            lr=v["eval.lr"],
            momentum=v["eval.momentum"],
            batch=v["eval.batch"],
            augment=v["eval.augment"],
            width=v["model.width"],
            quantize=v["eval.quantize"],
            augment_cfg=self.augment(),
        )


def parse_embedder(text: str):
    """``random-init``, ``all``, ``top`` or ``lo:hi`` accuracy range."""
    if text in ("random-init", "all", "top"):
        return text
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad embedder selector {text!r}") from exc
    return (lo, hi)


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float):
        # repr gives the shortest round-tripping decimal on every platform.
        return {"__float__": repr(obj)}
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(obj: Any) -> str:
    return sha256_text(canonical_json(obj))[:16]
