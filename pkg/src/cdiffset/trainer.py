"""Diffusion-stage training: timestep and noise draws, forward noising,
confidence-weighted loss, AdamW with warmup plus cosine decay, checkpoints.

Latents of the (frozen) VAE are computed once per training image and
dihedral orientation and reused, so a training step only touches the U-Net.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ptf
from . import tensor as T
from .data import dihedral
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, forward_diffuse, sample_timestep
from .loss import LossConfig, cdiff_loss
from .optim import AdamW, clip_grad_norm
from .seeds import DEFAULT_SEED, rng_for
from .tensor import Tensor
from .vae import VAE, encode_moments, sar_to_rgb

log = logging.getLogger(__name__)

LOG_HEADER = "step\tlr\tloss\tmean_conf"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    warmup_steps: int = 100
    lr_init: float = 3e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = DEFAULT_SEED
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    augment: bool = True

    def __post_init__(self) -> None:
        if self.lr_init <= 0:
            raise ValueError(f"lr_init must be positive, got {self.lr_init}")
        if not 0 <= self.warmup_steps < self.iterations:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be below iterations ({self.iterations})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_init`` then half-cosine decay towards zero."""
    if not 0 <= step < cfg.iterations:
        raise ValueError(f"step {step} outside [0, {cfg.iterations})")
    if step < cfg.warmup_steps:
        return cfg.lr_init * step / cfg.warmup_steps
    span = cfg.iterations - cfg.warmup_steps
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


@dataclass
class LatentCache:
    """Per (image, orientation) VAE latents: SAR mean plus EO posterior mean and std."""
    sar_mean: np.ndarray  # (N, K, C, h, w)
    eo_mean: np.ndarray
    eo_std: np.ndarray

    @property
    def count(self) -> int:
        return self.sar_mean.shape[0]

    @property
    def orientations(self) -> int:
        return self.sar_mean.shape[1]


def build_latent_cache(sar: Sequence[np.ndarray], eo: Sequence[np.ndarray], vae: VAE,
                       augment: bool = True, chunk: int = 32) -> LatentCache:
    if len(sar) != len(eo) or not len(sar):
        raise ValueError("need a non-empty, equal number of SAR and EO images")
    ks = range(8) if augment else range(1)
    sar_rgb = [sar_to_rgb(np.asarray(s, dtype=np.float32)) for s in sar]
    eo = [np.asarray(e, dtype=np.float32) for e in eo]

    def encode_all(images):
        stack = np.stack([dihedral(img, k) for img in images for k in ks])
        parts = [encode_moments(stack[i:i + chunk], vae) for i in range(0, len(stack), chunk)]
        mu = np.concatenate([p[0] for p in parts])
        sd = np.concatenate([p[1] for p in parts])
        shape = (len(images), len(ks)) + mu.shape[1:]
        return mu.reshape(shape), sd.reshape(shape)

    sar_mu, _ = encode_all(sar_rgb)
    eo_mu, eo_sd = encode_all(eo)
    return LatentCache(sar_mu, eo_mu, eo_sd)


@dataclass
class StepResult:
    step: int
    lr: float
    loss: float
    mean_conf: float
    grad_norm: float
    timesteps: np.ndarray


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices for a step: consecutive slices of per-epoch permutations."""
    pos = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs = pos // n
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = rng_for(seed, "epoch", int(e)).permutation(n)
        sel = epochs == e
        out[sel] = perm[pos[sel] % n]
    return out


def train_step(model: Denoiser, opt: AdamW, z_x: np.ndarray, z_y: np.ndarray,
               schedule: NoiseSchedule, cfg: TrainConfig, step: int,
               rng: np.random.Generator, forward: Callable | None = None) -> StepResult:
    """One optimiser update on a latent batch (N, C, h, w).

    ``forward`` overrides the U-Net call (used to probe the loss path with a
    fixed prediction); it takes (z_t, z_x, t, eps) and returns (eps_hat, conf).
    """
    if len(z_y) == 0:
        raise ValueError("empty batch")
    t = sample_timestep(rng, schedule, len(z_y))
    eps = rng.standard_normal(z_y.shape).astype(np.float32)
    z_t = forward_diffuse(z_y, t, eps, schedule)
    if forward is None:
        out = model(Tensor(z_t), Tensor(z_x), t)
        eps_hat, conf = out.eps_hat, out.conf
    else:
        eps_hat, conf = forward(z_t, z_x, t, eps)
    loss = cdiff_loss(eps, eps_hat, conf, cfg.loss)
    value = loss.item()
    if not math.isfinite(value):
        T.current_tape().clear()
        resid = float(np.mean((eps - eps_hat.data) ** 2))
        raise TrainingDiverged(
            f"non-finite loss at step {step}: loss={value} t={t.tolist()} "
            f"mean_sq_residual={resid:.6g} conf_min={float(conf.data.min()):.6g} "
            f"conf_max={float(conf.data.max()):.6g}"
        )
    lr = lr_at(step, cfg)
    model.zero_grad()
    T.backward(loss)
    norm = clip_grad_norm(opt.params, cfg.grad_clip) if cfg.grad_clip else float("nan")
    opt.step(lr)
    return StepResult(step, lr, value, float(conf.data.mean()), norm, t)


class Trainer:
    """Owns the mutable training state: model, optimiser and step counter."""

    def __init__(self, model: Denoiser, cache: LatentCache, schedule: NoiseSchedule,
                 cfg: TrainConfig, opt: AdamW | None = None, step: int = 0) -> None:
        self.model = model
        self.cache = cache
        self.schedule = schedule
        self.cfg = cfg
        self.opt = opt or AdamW(model.parameters(), weight_decay=cfg.weight_decay)
        self.step = step

    def next_batch(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = batch_indices(self.step, self.cache.count, self.cfg.batch_size, self.cfg.seed)
        k = rng.integers(0, self.cache.orientations, len(idx))
        z_x = self.cache.sar_mean[idx, k]
        mu, sd = self.cache.eo_mean[idx, k], self.cache.eo_std[idx, k]
        z_y = (mu + sd * rng.standard_normal(mu.shape).astype(np.float32)).astype(np.float32)
        return z_x, z_y

    def run_step(self) -> StepResult:
        rng = rng_for(self.cfg.seed, "train-step", self.step)
        z_x, z_y = self.next_batch(rng)
        res = train_step(self.model, self.opt, z_x, z_y, self.schedule, self.cfg, self.step, rng)
        self.step += 1
        return res

    def run(self, until: int | None = None, log_path: str | Path | None = None,
            checkpoint_dir: str | Path | None = None) -> list[StepResult]:
        until = self.cfg.iterations if until is None else min(until, self.cfg.iterations)
        results = []
        fh = None
        if log_path is not None:
            log_path = Path(log_path)
            fresh = self.step == 0 or not log_path.exists()
            fh = log_path.open("w" if fresh else "a")
            if fresh:
                fh.write(LOG_HEADER + "\n")
        try:
            while self.step < until:
                res = self.run_step()
                results.append(res)
                if fh:
                    fh.write(f"{res.step}\t{res.lr:.6e}\t{res.loss:.6f}\t{res.mean_conf:.6f}\n")
                if res.step % 100 == 0:
                    log.info("step %d lr %.3e loss %.5f conf %.4f", res.step, res.lr, res.loss, res.mean_conf)
                every = self.cfg.checkpoint_every
                if checkpoint_dir and every and self.step % every == 0:
                    checkpoint(self, checkpoint_dir)
        finally:
            if fh:
                fh.close()
        return results


def checkpoint(trainer: Trainer, directory: str | Path, extra_meta: dict | None = None) -> list[Path]:
    """Write model weights, optimiser moments and the step counter to one directory."""
    tensors = {f"model.{k}": v for k, v in trainer.model.state_dict().items()}
    tensors.update({f"opt.{k}": v for k, v in trainer.opt.state_dict().items()})
    meta = {"kind": "train-state", "step": trainer.step, **trainer.model.config(), **(extra_meta or {})}
    return ptf.save_dir(directory, tensors, meta)


def resume(directory: str | Path) -> tuple[Denoiser, dict[str, np.ndarray], int]:
    """Inverse of :func:`checkpoint`: (model, optimiser state, step)."""
    tensors, meta = ptf.load_dir(directory)
    if meta.get("kind") != "train-state":
        raise ptf.CheckpointError(f"{directory} is not a training checkpoint")
    keys = ("base_channels", "levels", "cond_dim", "latent_channels", "in_channels")
    try:
        model = Denoiser(**{k: int(meta[k]) for k in keys})
        step = int(meta["step"])
    except (KeyError, ValueError) as exc:
        raise ptf.CheckpointError(f"{directory}: incomplete checkpoint metadata ({exc})") from None
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    opt_state = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
    return model, opt_state, step


def resume_trainer(directory: str | Path, cache: LatentCache, schedule: NoiseSchedule,
                   cfg: TrainConfig) -> Trainer:
    model, opt_state, step = resume(directory)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    opt.load_state_dict(opt_state)
    return Trainer(model, cache, schedule, cfg, opt, step)
