"""Confidence-weighted noise-prediction loss.

Confidence is a per-pixel precision: the squared noise residual at a pixel is
scaled by ``conf ** beta`` and a ``-beta * log(conf)`` term keeps confidence
from collapsing to zero. ``beta = 0`` reduces to plain MSE plus a constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor

CONF_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0
    tau: float = LOG_2PI
    stop_grad_weight: bool = False
    literal_form: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def _check(eps: Tensor, eps_hat: Tensor, conf: Tensor) -> None:
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"eps {eps.shape} and eps_hat {eps_hat.shape} differ")
    if eps.ndim < 3:
        raise ShapeError(f"expected (C, h, w) or (N, C, h, w) noise, got {eps.shape}")
    want = eps.shape[:-3] + (1,) + eps.shape[-2:]
    if conf.shape != want:
        raise ShapeError(f"confidence {conf.shape} does not match noise {eps.shape}; expected {want}")
    if np.any(~(conf.data > 0)):
        raise DomainError("confidence must be strictly positive")


def cdiff_loss(eps, eps_hat, conf, cfg: LossConfig | None = None) -> Tensor:
    """Mean over pixels of ``w * r2 - beta * log(conf) + tau``.

    ``r2`` is the squared residual averaged over channels and ``w = conf **
    beta``; with ``cfg.stop_grad_weight`` the weight is treated as a constant.
    """
    cfg = cfg or LossConfig()
    eps, eps_hat, conf = T.as_tensor(eps), T.as_tensor(eps_hat), T.as_tensor(conf)
    _check(eps, eps_hat, conf)
    c = T.clamp(conf, lo=CONF_FLOOR)
    diff = eps - eps_hat
    if cfg.literal_form:
        scaled = diff * T.power(c, cfg.beta) if cfg.beta else diff
        v = scaled - T.log(c) * cfg.beta + cfg.tau if cfg.beta else scaled + cfg.tau
        return T.mean(v * v)
    r2 = T.mean(diff * diff, axis=-3, keepdims=True)
    if cfg.beta == 0.0:
        return T.mean(r2) + cfg.tau
    w = T.power(c, cfg.beta)
    if cfg.stop_grad_weight:
        w = Tensor(w.data)
    return T.mean(w * r2 - T.log(c) * cfg.beta) + cfg.tau


def cdiff_loss_reference(eps, eps_hat, conf, cfg: LossConfig) -> float:
    """Float64 numpy evaluation of the default (non-literal) loss value."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    c = np.maximum(np.asarray(conf, dtype=np.float64), CONF_FLOOR)
    r2 = ((eps - eps_hat) ** 2).mean(axis=-3, keepdims=True)
    return float((c ** cfg.beta * r2 - cfg.beta * np.log(c) + cfg.tau).mean())


def stationary_confidence(r2, beta: float = 1.0) -> np.ndarray:
    """Minimiser of ``c**beta * r2 - beta * log(c)`` over c > 0, i.e. ``1 / r2``."""
    if beta <= 0:
        raise ValueError("no finite stationary confidence when beta is 0")
    return 1.0 / np.asarray(r2, dtype=np.float64)


@dataclass
class GradientReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float
    stationary: np.ndarray


def confidence_regularizer_gradients(eps, eps_hat, conf, cfg: LossConfig | None = None,
                                     h: float = 1e-4) -> GradientReport:
    """Compare autodiff d(loss)/d(conf) with central differences of the float64 reference.

    Finite differences always see the full weight term, so a meaningful
    comparison needs ``stop_grad_weight`` off.
    """
    cfg = cfg or LossConfig()
    eps = np.asarray(eps, dtype=np.float32)
    eps_hat = np.asarray(eps_hat, dtype=np.float32)
    conf = np.asarray(conf, dtype=np.float32)
    c = Tensor(conf, requires_grad=True)
    loss = cdiff_loss(Tensor(eps), Tensor(eps_hat), c, cfg)
    T.backward(loss)
    analytic = c.grad.astype(np.float64)

    base = conf.astype(np.float64)
    numeric = np.empty_like(base)
    flat, nflat = base.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        keep = flat[i]
        flat[i] = keep + step
        up = cdiff_loss_reference(eps, eps_hat, base, cfg)
        flat[i] = keep - step
        down = cdiff_loss_reference(eps, eps_hat, base, cfg)
        flat[i] = keep
        nflat[i] = (up - down) / (2 * step)
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    rel = np.abs(analytic - numeric) / np.maximum(scale, 1e-12)
    r2 = ((eps.astype(np.float64) - eps_hat) ** 2).mean(axis=-3, keepdims=True)
    stationary = stationary_confidence(r2, cfg.beta) if cfg.beta > 0 else np.full(r2.shape, np.inf)
    return GradientReport(analytic, numeric, float(rel.max()), stationary)
