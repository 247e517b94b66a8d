"""Deterministic DDIM sampling of EO latents conditioned on a SAR latent."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .denoiser import Denoiser
from .diffusion import InferencePlan, NoiseSchedule, ddim_step, forward_diffuse, make_inference_plan
from .metrics import psnr, scc, ssim
from .seeds import DEFAULT_SEED, rng_for
from .tensor import Tensor
from .vae import DOWNSAMPLE, VAE, decode, encode, sar_to_rgb

SNAPSHOTS = 11


@dataclass(frozen=True)
class SamplerConfig:
    plan: InferencePlan
    seed: int = DEFAULT_SEED
    export_intermediate: bool = False


@dataclass
class SampleResult:
    image: np.ndarray  # (3, H, W) or batch
    latent: np.ndarray
    intermediates: list[tuple[int, np.ndarray]]
    denoiser_calls: int


def snapshot_positions(n_steps: int, count: int = SNAPSHOTS) -> list[int]:
    """Evenly spaced loop indices (including the first and last) to export."""
    if n_steps <= count:
        return list(range(n_steps))
    return sorted({int(round(i * (n_steps - 1) / (count - 1))) for i in range(count)})


def initial_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    return rng_for(seed, "sample-noise").standard_normal(shape).astype(np.float32)


def sample_latent(z_x: np.ndarray, model: Denoiser, schedule: NoiseSchedule, plan: InferencePlan,
                  z_init: np.ndarray, on_step=None, conf_hook=None) -> tuple[np.ndarray, int]:
    """Run the plan from ``z_init``; the confidence output never feeds back.

    ``conf_hook`` receives each confidence map (for inspection only);
    ``on_step(i, t_prev, z)`` sees the latent after every update.
    """
    if z_init.shape != z_x.shape:
        raise T.ShapeError(f"noise {z_init.shape} and SAR latent {z_x.shape} differ")
    z = z_init
    calls = 0
    zx = Tensor(z_x)
    with T.no_grad():
        for i, (t, t_prev) in enumerate(plan.pairs()):
            out = model(Tensor(z), zx, np.full(len(z), t))
            calls += 1
            if conf_hook is not None:
                conf_hook(out.conf.data)
            z = ddim_step(z, out.eps_hat.data, t, t_prev, schedule)
            if on_step is not None:
                on_step(i, t_prev, z)
    return z, calls


def sample_eo(sar: np.ndarray, model: Denoiser, vae: VAE, schedule: NoiseSchedule,
              cfg: SamplerConfig, conf_hook=None) -> SampleResult:
    """Translate a SAR image (C, H, W) or batch (N, C, H, W) to EO."""
    sar = np.asarray(sar, dtype=np.float32)
    single = sar.ndim == 3
    batch = sar[None] if single else sar
    if batch.shape[-1] % DOWNSAMPLE or batch.shape[-2] % DOWNSAMPLE:
        raise T.ShapeError(f"image size {batch.shape[-2:]} must be divisible by {DOWNSAMPLE}")
    if model.in_channels != 2 * vae.latent_channels:
        raise T.ShapeError(f"denoiser takes {model.in_channels} input channels, "
                           f"VAE latents need {2 * vae.latent_channels}")
    z_x = encode(sar_to_rgb(batch), vae)
    z_init = initial_noise(z_x.shape, cfg.seed)
    snaps: list[tuple[int, np.ndarray]] = []
    keep = set(snapshot_positions(len(cfg.plan.timesteps))) if cfg.export_intermediate else set()

    def on_step(i, t_prev, z):
        if i in keep:
            img = decode(z, vae)
            snaps.append((t_prev, img[0] if single else img))

    z, calls = sample_latent(z_x, model, schedule, cfg.plan, z_init, on_step, conf_hook)
    image = decode(z, vae)
    if single:
        return SampleResult(image[0], z[0], snaps, calls)
    return SampleResult(image, z, snaps, calls)


def confidence_map_at(sar: np.ndarray, eo: np.ndarray, model: Denoiser, vae: VAE,
                      schedule: NoiseSchedule, t: int | None = None,
                      seed: int = DEFAULT_SEED) -> np.ndarray:
    """Confidence (1, h, w) at timestep ``t`` (default T/2) for a known pair.

    The EO latent is noised with fresh noise from ``seed``; accepts batches.
    """
    t = schedule.T // 2 if t is None else int(t)
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [1, {schedule.T}]")
    sar = np.asarray(sar, dtype=np.float32)
    eo = np.asarray(eo, dtype=np.float32)
    single = eo.ndim == 3
    if single:
        sar, eo = sar[None], eo[None]
    z_x = encode(sar_to_rgb(sar), vae)
    z_y = encode(eo, vae)
    eps = rng_for(seed, "confidence-probe", t).standard_normal(z_y.shape).astype(np.float32)
    z_t = forward_diffuse(z_y, np.full(len(z_y), t), eps, schedule)
    with T.no_grad():
        conf = model(Tensor(z_t), Tensor(z_x), np.full(len(z_y), t)).conf.data
    return conf[0] if single else conf


def upsample_map(conf: np.ndarray, factor: int = DOWNSAMPLE) -> np.ndarray:
    return np.repeat(np.repeat(conf, factor, axis=-2), factor, axis=-1)


@dataclass
class SweepRow:
    steps: int
    psnr: float
    ssim: float
    scc: float
    seconds_per_image: float


def sweep_inference_steps(sar: np.ndarray, eo: np.ndarray, model: Denoiser, vae: VAE,
                          schedule: NoiseSchedule, steps_list: Sequence[int],
                          seed: int = DEFAULT_SEED) -> list[SweepRow]:
    """Median PSNR/SSIM/SCC and wall time per image for each step count."""
    if not len(steps_list):
        raise ValueError("steps_list is empty")
    rows = []
    for n in steps_list:
        cfg = SamplerConfig(make_inference_plan(schedule.T, n), seed)
        t0 = time.perf_counter()
        res = sample_eo(sar, model, vae, schedule, cfg)
        elapsed = time.perf_counter() - t0
        preds = np.clip(res.image, 0.0, 1.0)
        rows.append(SweepRow(
            n,
            float(np.median([psnr(p, y) for p, y in zip(preds, eo)])),
            float(np.median([ssim(p, y) for p, y in zip(preds, eo)])),
            float(np.median([scc(p, y, return_flag=True)[0] for p, y in zip(preds, eo)])),
            elapsed / len(eo),
        ))
    return rows


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = ["steps\tpsnr\tssim\tscc\tseconds_per_image"]
    lines += [f"{r.steps}\t{r.psnr:.4f}\t{r.ssim:.4f}\t{r.scc:.4f}\t{r.seconds_per_image:.4f}" for r in rows]
    return "\n".join(lines) + "\n"
