"""Batch evaluation of a trained translator over the test split of a manifest."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, make_inference_plan
from .metrics import confidence_auroc, psnr, scc, ssim
from .sampler import SamplerConfig, confidence_map_at, sample_eo
from .seeds import DEFAULT_SEED
from .vae import VAE

REPORT_HEADER = "id\tpsnr\tssim\tscc"


class MissingFilesError(FileNotFoundError):
    pass


@dataclass
class MetricRow:
    id: str
    psnr: float
    ssim: float
    scc: float


@dataclass
class MetricReport:
    rows: list[MetricRow]
    auroc: float | None = None
    extra: dict[str, float] = field(default_factory=dict)

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(r, name) for r in self.rows]))

    def median(self, name: str) -> float:
        return float(np.median([getattr(r, name) for r in self.rows]))

    def to_tsv(self) -> str:
        lines = [REPORT_HEADER]
        lines += [f"{r.id}\t{r.psnr:.6f}\t{r.ssim:.6f}\t{r.scc:.6f}" for r in self.rows]
        lines.append(f"ALL\t{self.mean('psnr'):.6f}\t{self.mean('ssim'):.6f}\t{self.mean('scc'):.6f}")
        if self.auroc is not None:
            lines.append(f"# confidence_auroc\t{self.auroc:.6f}")
        return "\n".join(lines) + "\n"


def score_images(ids: Sequence[str], preds: np.ndarray, targets: np.ndarray) -> list[MetricRow]:
    rows = []
    for id_, p, y in zip(ids, preds, targets):
        p = np.clip(p, 0.0, 1.0)
        rows.append(MetricRow(id_, psnr(p, y), ssim(p, y), scc(p, y, return_flag=True)[0]))
    return rows


def load_split(dataset: Dataset, split: str = "test", sar_gain: float = 1.0):
    """Load every pair of ``split``; ``sar_gain`` rescales SAR magnitudes of ingested data."""
    entries = dataset.split(split)
    if not entries:
        raise ValueError(f"{split} split is empty")
    missing = dataset.missing_files()
    if missing:
        raise MissingFilesError("missing files for ids: " + ", ".join(missing))
    pairs = [dataset.load(e, sar_gain) for e in entries]
    return entries, pairs


def evaluate_manifest(dataset: Dataset, model: Denoiser, vae: VAE, schedule: NoiseSchedule,
                      steps: int = 50, seed: int = DEFAULT_SEED, with_auroc: bool = False,
                      batch: int = 16, sar_gain: float = 1.0) -> MetricReport:
    """Sample every test pair and score it; deterministic for a fixed seed."""
    entries, pairs = load_split(dataset, sar_gain=sar_gain)
    cfg = SamplerConfig(make_inference_plan(schedule.T, steps), seed)
    sar = np.stack([p.sar for p in pairs])
    eo = np.stack([p.eo for p in pairs])
    preds = np.concatenate([sample_eo(sar[i:i + batch], model, vae, schedule, cfg).image
                            for i in range(0, len(sar), batch)])
    report = MetricReport(score_images([e.id for e in entries], preds, eo))
    if with_auroc:
        conf = np.concatenate([confidence_map_at(sar[i:i + batch], eo[i:i + batch], model, vae, schedule,
                                                 seed=seed) for i in range(0, len(sar), batch)])
        masks = np.stack([p.mask for p in pairs])
        report.auroc = confidence_auroc(list(conf), list(masks))
    return report


def mean_image_baseline(train_eo: np.ndarray, test_eo: np.ndarray) -> list[float]:
    """PSNR of predicting the per-pixel mean training image for every test image."""
    mean = np.asarray(train_eo, dtype=np.float64).mean(axis=0)
    return [psnr(mean, y) for y in test_eo]


def write_report(report: MetricReport, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(report.to_tsv())
    return path
