"""Reference-based image metrics and confidence-map diagnostics."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.stats import rankdata

PSNR_CAP = 100.0
LAPLACIAN = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two trailing axes."""
    k = len(g)
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[..., :, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid windows and channels."""
    a, b = _pair(a, b)
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {window}x{window} SSIM window")
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    per_channel = (num / den).reshape(a.shape[0], -1).mean(axis=1)
    return float(per_channel.mean())


def _laplacian_valid(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2:]
    out = np.zeros(img.shape[:-2] + (h - 2, w - 2))
    for i in range(3):
        for j in range(3):
            if LAPLACIAN[i, j]:
                out += LAPLACIAN[i, j] * img[..., i:h - 2 + i, j:w - 2 + j]
    return out


def scc(a, b, return_flag: bool = False):
    """Spatial correlation coefficient: Pearson correlation of Laplacian responses.

    A channel whose high-pass response has zero variance in either image
    contributes 0 and sets the degenerate flag.
    """
    a, b = _pair(a, b)
    ha, hb = _laplacian_valid(a), _laplacian_valid(b)
    vals, degenerate = [], False
    for x, y in zip(ha, hb):
        x = x - x.mean()
        y = y - y.mean()
        den = math.sqrt(float((x * x).sum()) * float((y * y).sum()))
        if den == 0.0:
            vals.append(0.0)
            degenerate = True
        else:
            vals.append(float((x * y).sum()) / den)
    value = float(np.mean(vals))
    if degenerate and not return_flag:
        warnings.warn("scc: zero-variance high-pass field, channel scored 0", RuntimeWarning, stacklevel=2)
    return (value, degenerate) if return_flag else value


def pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool a (..., H, W) mask by ``factor``."""
    m = np.asarray(mask)
    *lead, h, w = m.shape
    return m.reshape(*lead, h // factor, factor, w // factor, factor).max(axis=(-3, -1))


def confidence_auroc(conf_maps, masks) -> float:
    """AUROC of score = -confidence for predicting discrepancy cells.

    ``conf_maps`` are at latent resolution; ``masks`` may be at image
    resolution and are max-pooled down to match.
    """
    conf = np.concatenate([np.asarray(c, dtype=np.float64).reshape(-1) for c in conf_maps])
    labs = []
    for c, m in zip(conf_maps, masks):
        m = np.asarray(m)
        ch, cw = np.shape(c)[-2:]
        factor = m.shape[-1] // cw
        if factor > 1:
            m = pool_mask(m, factor)
        labs.append((m.reshape(-1) > 0.5))
    labels = np.concatenate(labs)
    if labels.shape != conf.shape:
        raise ValueError("confidence maps and masks do not align")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("confidence_auroc needs both discrepancy and clean cells")
    ranks = rankdata(-conf)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
