"""Conditional U-Net predicting latent noise and a per-pixel confidence map.

Input is the channel concatenation ``[noisy EO latent | SAR latent]``. The
timestep enters as a sinusoidal embedding; a learned conditioning vector
(the fixed-prompt stand-in) is added to it before the embedding MLP. Both
outputs share the trunk and split at the final convolutions; confidence goes
through softplus so it is non-negative.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ptf
from . import tensor as T
from .nn import Conv2d, GroupNorm, Linear, Module, Param
from .seeds import DEFAULT_SEED, rng_for
from .tensor import Tensor

CONF_INIT_BIAS = math.log(math.e - 1.0)  # softplus(bias) == 1


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) features of ``t`` at geometric frequencies 1 .. 1e-4."""
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(1e4) * np.arange(half) / max(half - 1, 1))
    t_arr = np.asarray(t, dtype=np.float64)
    args = t_arr[..., None] * freqs
    emb = np.empty(t_arr.shape + (dim,))
    emb[..., 0::2] = np.sin(args)
    emb[..., 1::2] = np.cos(args)
    return emb.astype(np.float32)


def _groups(channels: int, max_groups: int = 8) -> int:
    return math.gcd(channels, max_groups)


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, rng: np.random.Generator) -> None:
        self.norm1 = GroupNorm(_groups(cin), cin)
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.emb_proj = Linear(emb_dim, cout, rng)
        self.norm2 = GroupNorm(_groups(cout), cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        e = self.emb_proj(emb)
        h = h + T.reshape(e, e.shape + (1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return (self.skip(x) if self.skip is not None else x) + h


@dataclass
class DenoiserOutput:
    eps_hat: Tensor
    conf: Tensor


class Denoiser(Module):
    def __init__(self, base_channels: int = 32, levels: int = 3, cond_dim: int = 64,
                 latent_channels: int = 4, in_channels: int | None = None,
                 seed: int = DEFAULT_SEED) -> None:
        if base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {base_channels}")
        if levels < 1:
            raise ValueError("levels must be >= 1")
        rng = rng_for(seed, "denoiser-init")
        self.base_channels = base_channels
        self.levels = levels
        self.cond_dim = cond_dim
        self.latent_channels = latent_channels
        self.in_channels = in_channels if in_channels is not None else 2 * latent_channels
        emb_dim = 4 * base_channels
        chans = [base_channels * 2 ** i for i in range(levels)]

        self.in_conv = Conv2d(self.in_channels, base_channels, 3, rng)
        self.z_c = Param(rng.standard_normal(cond_dim) * 0.02)
        self.t_mlp1 = Linear(cond_dim, emb_dim, rng)
        self.t_mlp2 = Linear(emb_dim, emb_dim, rng)

        self.enc: list[list[ResBlock]] = []
        self.downs: list[Conv2d] = []
        prev = base_channels
        for i, ch in enumerate(chans):
            self.enc.append([ResBlock(prev, ch, emb_dim, rng), ResBlock(ch, ch, emb_dim, rng)])
            prev = ch
            if i < levels - 1:
                self.downs.append(Conv2d(ch, ch, 3, rng, stride=2))
        self.mid = ResBlock(prev, prev, emb_dim, rng)
        self.dec: list[list[ResBlock]] = [None] * levels  # type: ignore[list-item]
        self.ups: list[Conv2d] = [None] * (levels - 1)  # type: ignore[list-item]
        for i in reversed(range(levels)):
            ch = chans[i]
            self.dec[i] = [ResBlock(prev + ch, ch, emb_dim, rng), ResBlock(ch, ch, emb_dim, rng)]
            prev = ch
            if i > 0:
                self.ups[i - 1] = Conv2d(ch, ch, 3, rng)
        self.out_norm = GroupNorm(_groups(base_channels), base_channels)
        self.noise_head = Conv2d(base_channels, latent_channels, 3, rng, zero=True)
        self.conf_head = Conv2d(base_channels, 1, 3, rng, zero=True)
        self.conf_head.bias.data[:] = CONF_INIT_BIAS

    def embed(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        temb = Tensor(timestep_embedding(t, self.cond_dim)) + self.z_c
        return T.silu(self.t_mlp2(T.silu(self.t_mlp1(temb))))

    def first_layer(self, z_y_t: Tensor, z_x: Tensor) -> Tensor:
        return self.in_conv(T.concat([z_y_t, z_x], axis=1))

    def __call__(self, z_y_t: Tensor, z_x: Tensor, t) -> DenoiserOutput:
        if z_y_t.shape != z_x.shape:
            raise T.ShapeError(f"noisy latent {z_y_t.shape} and SAR latent {z_x.shape} differ")
        div = 2 ** (self.levels - 1)
        if z_y_t.shape[-1] % div or z_y_t.shape[-2] % div:
            raise T.ShapeError(f"latent size {z_y_t.shape[-2:]} must be divisible by {div}")
        emb = self.embed(t)
        if emb.shape[0] != z_y_t.shape[0]:
            emb = T.concat([emb] * z_y_t.shape[0], axis=0) if emb.shape[0] == 1 else _bad_t(emb, z_y_t)
        h = self.first_layer(z_y_t, z_x)
        skips = []
        for i, blocks in enumerate(self.enc):
            for blk in blocks:
                h = blk(h, emb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.downs[i](h)
        h = self.mid(h, emb)
        for i in reversed(range(self.levels)):
            h = T.concat([h, skips[i]], axis=1)
            for blk in self.dec[i]:
                h = blk(h, emb)
            if i > 0:
                h = self.ups[i - 1](T.upsample_nearest(h, 2))
        h = T.silu(self.out_norm(h))
        return DenoiserOutput(self.noise_head(h), T.softplus(self.conf_head(h)))

    def config(self) -> dict[str, int]:
        return {"base_channels": self.base_channels, "levels": self.levels, "cond_dim": self.cond_dim,
                "latent_channels": self.latent_channels, "in_channels": self.in_channels}

    def save(self, directory: str | Path, extra_meta: dict | None = None) -> list[Path]:
        meta = {"kind": "denoiser", **self.config(), **(extra_meta or {})}
        return ptf.save_dir(directory, self.state_dict(), meta)

    @classmethod
    def load(cls, directory: str | Path) -> "Denoiser":
        tensors, meta = ptf.load_dir(directory)
        if meta.get("kind") != "denoiser":
            raise ptf.CheckpointError(f"{directory} is not a denoiser checkpoint")
        model = cls(**{k: int(meta[k]) for k in ("base_channels", "levels", "cond_dim",
                                                   "latent_channels", "in_channels")})
        model.load_state_dict(tensors)
        return model


def _bad_t(emb: Tensor, z: Tensor):
    raise T.ShapeError(f"{emb.shape[0]} timesteps for a batch of {z.shape[0]}")


def init_denoiser(base_channels: int = 32, seed: int = DEFAULT_SEED, **kwargs) -> Denoiser:
    return Denoiser(base_channels=base_channels, seed=seed, **kwargs)


def expand_input_conv(model: Denoiser, sar_channels: int | None = None) -> Denoiser:
    """Widen an EO-only input conv to take SAR channels, copying its weights onto them."""
    sar_channels = model.latent_channels if sar_channels is None else sar_channels
    if model.in_channels != sar_channels:
        raise T.ShapeError(f"source input conv has {model.in_channels} channels, "
                           f"cannot repeat it across {sar_channels} SAR channels")
    cfg = model.config()
    cfg["in_channels"] = model.in_channels + sar_channels
    wide = Denoiser(**cfg)
    state = model.state_dict()
    w = state["in_conv.weight"]
    state["in_conv.weight"] = np.concatenate([w, w], axis=1)
    wide.load_state_dict(state)
    return wide


def _as_batch(x) -> tuple[Tensor, bool]:
    arr = x if isinstance(x, Tensor) else Tensor(x)
    if arr.ndim == 3:
        return T.reshape(arr, (1,) + arr.shape), True
    return arr, False


def denoise(z_y_t, z_x, t, model: Denoiser) -> DenoiserOutput:
    """Run the U-Net on one latent (C, h, w) or a batch (N, C, h, w)."""
    zt, single = _as_batch(z_y_t)
    zx, _ = _as_batch(z_x)
    if zt.shape != zx.shape:
        raise T.ShapeError(f"noisy latent {zt.shape} and SAR latent {zx.shape} differ")
    out = model(zt, zx, t)
    if single:
        return DenoiserOutput(T.reshape(out.eps_hat, out.eps_hat.shape[1:]),
                              T.reshape(out.conf, out.conf.shape[1:]))
    return out
