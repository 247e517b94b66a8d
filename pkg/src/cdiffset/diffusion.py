"""Noise schedule, forward noising and the deterministic (eta = 0) DDIM update.

Timesteps are 1-based (``1..T``). ``alpha_bar(0) == 1`` by convention, so a
DDIM step to ``t_prev = 0`` returns the clean-latent estimate.

All functions take numpy arrays (or ``Tensor``) shaped ``(C, h, w)`` or a
batch ``(N, C, h, w)``; for a batch ``t`` may be an array of ``N`` timesteps.
Arithmetic is float64, results are float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def alpha_bar_at(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


@dataclass(frozen=True)
class InferencePlan:
    T_test: int
    timesteps: tuple[int, ...]

    def pairs(self) -> list[tuple[int, int]]:
        """Consecutive (t, t_prev) pairs, ending with t_prev = 0."""
        ts = list(self.timesteps)
        return list(zip(ts, ts[1:] + [0]))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, beta, alpha_bar)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def _coef(schedule: NoiseSchedule, t, ndim: int, lo: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [{lo}, {schedule.T}]: {t}")
    ab = schedule.alpha_bar_at(t)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (ndim - 1))
    return ab


def forward_diffuse(z_y, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(alpha_bar_t) * z_y + sqrt(1 - alpha_bar_t) * eps."""
    z, e = _arr(z_y), _arr(eps)
    if z.shape != e.shape:
        raise ValueError(f"latent shape {z.shape} does not match noise shape {e.shape}")
    ab = _coef(schedule, t, z.ndim)
    out = np.sqrt(ab) * z.astype(np.float64) + np.sqrt(1.0 - ab) * e.astype(np.float64)
    return out.astype(np.float32)


def sample_timestep(rng: np.random.Generator, schedule: NoiseSchedule, size=None):
    """Uniform draw from {1, ..., T}."""
    return rng.integers(1, schedule.T + 1, size=size)


def predict_x0(z_t, eps_hat, t, schedule: NoiseSchedule) -> np.ndarray:
    z, e = _arr(z_t), _arr(eps_hat)
    ab = _coef(schedule, t, z.ndim)
    return ((z.astype(np.float64) - np.sqrt(1.0 - ab) * e) / np.sqrt(ab)).astype(np.float32)


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule) -> np.ndarray:
    if not t > t_prev >= 0:
        raise ValueError(f"DDIM step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    z, e = _arr(z_t), _arr(eps_hat)
    ab = _coef(schedule, t, z.ndim)
    ab_prev = _coef(schedule, t_prev, z.ndim, lo=0)
    e64 = e.astype(np.float64)
    x0 = (z.astype(np.float64) - np.sqrt(1.0 - ab) * e64) / np.sqrt(ab)
    if np.all(ab_prev == 1.0):
        return x0.astype(np.float32)
    return (np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * e64).astype(np.float32)


def make_inference_plan(T: int, T_test: int) -> InferencePlan:
    """Evenly spaced, strictly decreasing timesteps starting at ``T``.

    Stride is ``T // T_test``; with ties the grid is anchored at the top, so
    ``T_test = 1`` yields ``(T,)`` and ``T_test = T`` yields ``(T, ..., 1)``.
    """
    if not 1 <= T_test <= T:
        raise ValueError(f"inference steps must lie in [1, {T}], got {T_test}")
    stride = T // T_test
    return InferencePlan(T_test, tuple(T - k * stride for k in range(T_test)))
