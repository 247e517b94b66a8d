"""Shared SAR/EO latent space: a small convolutional VAE and SAR channel mapping.

The encoder downsamples by 8 with three stride-2 convolutions and emits 4
mean + 4 log-variance channels. The decoder mirrors it with nearest-neighbour
upsampling and ends in a sigmoid so reconstructions stay in [0, 1].

Latents are multiplied by ``latent_scale`` (fitted after training so encoded
training latents have unit standard deviation) before they reach the
diffusion model; ``decode`` divides it back out.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ptf
from . import tensor as T
from .metrics import psnr
from .nn import Conv2d, Module
from .optim import AdamW
from .seeds import DEFAULT_SEED, rng_for
from .tensor import Tensor

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DOWNSAMPLE = 8
LOGVAR_RANGE = (-30.0, 20.0)


@dataclass
class ImageSample:
    pixels: np.ndarray  # (C, H, W) in [0, 1]
    modality: str  # "sar" | "eo"

    def __post_init__(self) -> None:
        c, h, w = self.pixels.shape
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"image size {h}x{w} not divisible by {DOWNSAMPLE}")
        allowed = (1, 4) if self.modality == "sar" else (3,)
        if c not in allowed:
            raise ValueError(f"{self.modality} image with {c} channels (allowed {allowed})")


def sar_to_rgb(sar: np.ndarray) -> np.ndarray:
    """Map a 1-channel or (HH, HV, VH, VV) SAR image onto 3 VAE input channels."""
    sar = np.asarray(sar, dtype=np.float32)
    if sar.ndim not in (3, 4):
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {sar.shape}")
    c = sar.shape[-3]
    if c == 1:
        reps = [1] * sar.ndim
        reps[-3] = 3
        return np.tile(sar, reps)
    if c == 4:
        hh, hv, vh, vv = (sar[..., i, :, :] for i in range(4))
        return np.stack([hh, (hv + vh) * np.float32(0.5), vv], axis=-3)
    raise ValueError(f"unsupported SAR channel count {c}; expected 1 or 4")


class VAE(Module):
    def __init__(self, seed: int = DEFAULT_SEED, widths: Sequence[int] = (32, 64, 128),
                 latent_channels: int = LATENT_CHANNELS) -> None:
        rng = rng_for(seed, "vae-init")
        c1, c2, c3 = widths
        self.latent_channels = latent_channels
        self.widths = tuple(widths)
        self.enc = [Conv2d(3, c1, 3, rng, stride=2), Conv2d(c1, c2, 3, rng, stride=2),
                    Conv2d(c2, c3, 3, rng, stride=2)]
        self.enc_out = Conv2d(c3, 2 * latent_channels, 3, rng)
        self.dec_in = Conv2d(latent_channels, c3, 3, rng)
        self.dec = [Conv2d(c3, c2, 3, rng), Conv2d(c2, c1, 3, rng), Conv2d(c1, 3, 3, rng)]
        self.latent_scale = 1.0
        self.frozen = False

    def moments(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] % DOWNSAMPLE or x.shape[-2] % DOWNSAMPLE:
            raise ValueError(f"image size {x.shape[-2:]} not divisible by {DOWNSAMPLE}")
        h = x
        for conv in self.enc:
            h = T.silu(conv(h))
        m = self.enc_out(h)
        c = self.latent_channels
        mean = m[:, :c]
        logvar = T.clamp(m[:, c:], *LOGVAR_RANGE)
        return mean, logvar

    def decode_raw(self, z: Tensor) -> Tensor:
        h = T.silu(self.dec_in(z))
        for i, conv in enumerate(self.dec):
            h = conv(T.upsample_nearest(h, 2))
            h = T.silu(h) if i < len(self.dec) - 1 else T.sigmoid(h)
        return h

    def freeze(self) -> None:
        super().freeze()
        self.frozen = True

    # -- checkpoints ---------------------------------------------------
    def save(self, directory: str | Path) -> list[Path]:
        meta = {"kind": "vae", "widths": ",".join(map(str, self.widths)),
                "latent_channels": self.latent_channels, "latent_scale": repr(self.latent_scale)}
        return ptf.save_dir(directory, self.state_dict(), meta)

    @classmethod
    def load(cls, directory: str | Path) -> "VAE":
        tensors, meta = ptf.load_dir(directory)
        if meta.get("kind") != "vae":
            raise ptf.CheckpointError(f"{directory} is not a VAE checkpoint")
        vae = cls(widths=tuple(int(w) for w in meta["widths"].split(",")),
                  latent_channels=int(meta["latent_channels"]))
        vae.load_state_dict(tensors)
        vae.latent_scale = float(meta["latent_scale"])
        vae.freeze()
        return vae


def _batch(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img, dtype=np.float32)
    return (img[None], True) if img.ndim == 3 else (img, False)


def encode(img3: np.ndarray, vae: VAE, rng: np.random.Generator | None = None,
           mode: str = "mean") -> np.ndarray:
    """Scaled latent of a 3-channel image (or batch); ``mode`` is "mean" or "sample"."""
    x, single = _batch(img3)
    if x.shape[1] != 3:
        raise ValueError(f"encode expects 3 input channels, got {x.shape[1]}")
    with T.no_grad():
        mean, logvar = vae.moments(Tensor(x))
    z = mean.data.astype(np.float64)
    if mode == "sample":
        if rng is None:
            raise ValueError("mode='sample' needs an rng")
        z = z + np.exp(0.5 * logvar.data.astype(np.float64)) * rng.standard_normal(z.shape)
    elif mode != "mean":
        raise ValueError(f"unknown encode mode {mode!r}")
    z = (z * vae.latent_scale).astype(np.float32)
    return z[0] if single else z


def encode_moments(img3: np.ndarray, vae: VAE) -> tuple[np.ndarray, np.ndarray]:
    """Scaled posterior mean and (scaled) standard deviation, batched."""
    x, single = _batch(img3)
    with T.no_grad():
        mean, logvar = vae.moments(Tensor(x))
    s = vae.latent_scale
    mu = (mean.data.astype(np.float64) * s).astype(np.float32)
    sd = (np.exp(0.5 * logvar.data.astype(np.float64)) * s).astype(np.float32)
    return (mu[0], sd[0]) if single else (mu, sd)


def decode(z: np.ndarray, vae: VAE) -> np.ndarray:
    zb, single = _batch(z)
    if zb.shape[1] != vae.latent_channels:
        raise ValueError(f"decode expects {vae.latent_channels} latent channels, got {zb.shape[1]}")
    with T.no_grad():
        out = vae.decode_raw(Tensor(zb / np.float32(vae.latent_scale))).data
    return out[0] if single else out


def kl_to_standard_normal(mean: Tensor, logvar: Tensor) -> Tensor:
    """Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1))."""
    return T.mean((mean * mean + T.exp(logvar) - logvar - 1.0) * 0.5)


def vae_loss(vae: VAE, x: Tensor, rng: np.random.Generator, kl_weight: float) -> tuple[Tensor, float, float]:
    mean, logvar = vae.moments(x)
    z = mean + T.exp(logvar * 0.5) * Tensor(rng.standard_normal(mean.shape))
    recon = vae.decode_raw(z)
    diff = recon - x
    mse = T.mean(diff * diff)
    loss = mse + kl_weight * kl_to_standard_normal(mean, logvar) if kl_weight else mse
    return loss, float(mse.item()), float(loss.item())


def train_vae(images: np.ndarray, steps: int = 2000, kl_weight: float = 1e-4, batch_size: int = 16,
              lr: float = 2e-3, seed: int = DEFAULT_SEED, vae: VAE | None = None,
              log_every: int = 100, augment: bool = True) -> tuple[VAE, list[float]]:
    """Fit the VAE on EO-like images (N, 3, H, W), fit the latent scale, freeze.

    Returns the frozen model and the per-step training losses.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("train_vae needs a non-empty (N, 3, H, W) image array")
    vae = vae or VAE(seed)
    opt = AdamW(vae.parameters(), weight_decay=0.0)
    losses = []
    n = len(images)
    for step in range(steps):
        rng = rng_for(seed, "vae-step", step)
        idx = rng.integers(0, n, size=min(batch_size, n)) if n > batch_size else rng.permutation(n)
        batch = images[idx]
        if augment:
            from .data import dihedral

            batch = np.stack([dihedral(b, int(k)) for b, k in zip(batch, rng.integers(0, 8, len(batch)))])
        loss, mse, total = vae_loss(vae, Tensor(batch), rng, kl_weight)
        vae.zero_grad()
        T.backward(loss)
        # short warmup then cosine decay to 5% of the peak rate
        warm = min(1.0, (step + 1) / 50)
        frac = step / max(1, steps - 1)
        opt.step(lr * warm * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * frac))))
        losses.append(total)
        if log_every and step % log_every == 0:
            log.info("vae step %d loss %.5f mse %.5f", step, total, mse)
    fit_latent_scale(vae, images)
    vae.freeze()
    return vae, losses


def fit_latent_scale(vae: VAE, images: np.ndarray, max_images: int = 256) -> float:
    vae.latent_scale = 1.0
    sub = images[:max_images]
    means = np.concatenate([encode(sub[i:i + 32], vae) for i in range(0, len(sub), 32)])
    std = float(means.astype(np.float64).std())
    vae.latent_scale = 1.0 / std if std > 0 else 1.0
    return vae.latent_scale


def roundtrip(img3: np.ndarray, vae: VAE) -> np.ndarray:
    return decode(encode(img3, vae), vae)


def reconstruction_probe(sar_clean: np.ndarray, vae: VAE, speckle_levels: Sequence[float],
                         seed: int = DEFAULT_SEED) -> list[tuple[float, float]]:
    """PSNR of decode(encode_mean(speckled SAR)) against the clean SAR, per speckle level.

    A level is the speckle variance 1/L; level 0 means no speckle. ``sar_clean``
    is (C, H, W) or a batch; batch PSNR is the mean over images.
    """
    from .data import speckle_field

    clean, _ = _batch(sar_clean)
    target = sar_to_rgb(clean)
    rows = []
    for level in speckle_levels:
        if level < 0:
            raise ValueError(f"speckle level must be >= 0, got {level}")
        if level == 0:
            noisy = clean
        else:
            field = speckle_field(clean.shape, 1.0 / level, rng_for(seed, "probe", repr(level)))
            noisy = np.clip(clean * field, 0.0, 1.0)
        recon = decode(encode(sar_to_rgb(noisy), vae), vae)
        rows.append((float(level), float(np.mean([psnr(r, t) for r, t in zip(recon, target)]))))
    return rows


def format_probe(rows: Sequence[tuple[float, float]]) -> str:
    return "level\tpsnr\n" + "".join(f"{lvl:g}\t{p:.4f}\n" for lvl, p in rows)
