"""Flat ``section.key = value`` run configuration with typed defaults."""
from __future__ import annotations

import math
from pathlib import Path

from .data import SceneSpec
from .diffusion import NoiseSchedule, make_schedule
from .loss import LossConfig
from .seeds import DEFAULT_SEED
from .trainer import TrainConfig

DEFAULTS: dict[str, object] = {
    "run.seed": DEFAULT_SEED,
    "data.image_size": 64,
    "data.object_count_min": 3,
    "data.object_count_max": 12,
    "data.speckle_looks": 4.0,
    "data.discrepancy_prob": 0.3,
    "data.misalign_max": 4.0,
    "data.polarization": "single",
    "data.sar_gain": 1.0,
    "vae.steps": 1500,
    "vae.batch_size": 8,
    "vae.lr": 2e-3,
    "vae.kl_weight": 1e-4,
    "diffusion.T": 1000,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.02,
    "model.base_channels": 32,
    "model.levels": 3,
    "model.cond_dim": 64,
    "train.iterations": 5000,
    "train.warmup": 100,
    "train.lr": 3e-5,
    "train.weight_decay": 0.01,
    "train.batch_size": 8,
    "train.grad_clip": 1.0,
    "train.augment": True,
    "train.checkpoint_every": 0,
    "train.eval_every": 0,
    "loss.beta": 1.0,
    "loss.tau": math.log(2.0 * math.pi),
    "loss.stop_grad_weight": False,
    "loss.literal_form": False,
    "sample.steps": 50,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class ConfigError(ValueError):
    pass


def _convert(key: str, raw: str, where: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: type mismatch for {key}: expected "
                          f"{type(default).__name__}, got {raw!r}") from None
    return raw


class Config(dict):
    """Resolved configuration: every key in :data:`DEFAULTS`, typed."""

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            image_size=self["data.image_size"],
            object_count=(self["data.object_count_min"], self["data.object_count_max"]),
            speckle_looks=self["data.speckle_looks"],
            discrepancy_prob=self["data.discrepancy_prob"],
            misalign_max=self["data.misalign_max"],
            polarization=self["data.polarization"],
            seed=self["run.seed"],
        )

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self["diffusion.T"], self["diffusion.beta_start"], self["diffusion.beta_end"])

    def loss_config(self) -> LossConfig:
        return LossConfig(self["loss.beta"], self["loss.tau"], self["loss.stop_grad_weight"],
                          self["loss.literal_form"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self["train.iterations"], warmup_steps=self["train.warmup"],
            lr_init=self["train.lr"], weight_decay=self["train.weight_decay"],
            batch_size=self["train.batch_size"], seed=self["run.seed"], loss=self.loss_config(),
            eval_every=self["train.eval_every"], checkpoint_every=self["train.checkpoint_every"],
            grad_clip=self["train.grad_clip"], augment=self["train.augment"],
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.items()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str, source: str = "<config>", overrides: dict | None = None) -> Config:
    cfg = Config(DEFAULTS)
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{n}"
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{where}: parse error, expected 'section.key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key}")
        cfg[key] = _convert(key, value, where)
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"override: unknown key {key}")
        cfg[key] = _convert(key, str(value), "override") if isinstance(value, str) else value
    return cfg


def parse_config(path: str | Path | None, overrides: dict | None = None) -> Config:
    if path is None:
        return parse_config_text("", overrides=overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path), overrides)
