"""``cdiffset`` command line: data, codec training, diffusion training, sampling, evaluation.

Every subcommand writes into its ``--out`` directory and finishes by writing
``run_manifest.json`` there. Failures print one line ``error<TAB>category<TAB>message``
to stderr and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import imageio, ptf
from .config import Config, ConfigError, parse_config
from .data import read_manifest, write_dataset, ingest_paired_dir, render_scene
from .denoiser import Denoiser, init_denoiser
from .diffusion import make_inference_plan
from .evaluation import MissingFilesError, evaluate_manifest, load_split, write_report
from .provenance import write_run_manifest
from .sampler import (SamplerConfig, confidence_map_at, format_sweep, sample_eo,
                      sweep_inference_steps, upsample_map)
from .tensor import DomainError, ShapeError
from .trainer import Trainer, TrainingDiverged, build_latent_cache, checkpoint, resume_trainer
from .vae import VAE, format_probe, reconstruction_probe, train_vae

log = logging.getLogger("cdiffset")


def worker_count() -> int:
    raw = os.environ.get("CDIFF_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"CDIFF_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run(checkpoint_dir: str) -> tuple[Denoiser, VAE]:
    root = Path(checkpoint_dir)
    return Denoiser.load(root / "denoiser"), VAE.load(root / "vae")


# -- subcommands ------------------------------------------------------------
def cmd_gen_data(args, cfg: Config) -> Path:
    out = _out(args)
    write_dataset(cfg.scene_spec(), args.count, out, workers=worker_count())
    return out


def cmd_ingest(args, cfg: Config) -> Path:
    out = _out(args)
    ingest_paired_dir(args.sar_dir, args.eo_dir, out, seed=cfg["run.seed"])
    return out


def cmd_train_vae(args, cfg: Config) -> Path:
    out = _out(args)
    dataset = read_manifest(args.data)
    _, pairs = load_split(dataset, "train", cfg["data.sar_gain"])
    images = np.stack([p.eo for p in pairs])
    vae, losses = train_vae(images, steps=cfg["vae.steps"], kl_weight=cfg["vae.kl_weight"],
                            batch_size=cfg["vae.batch_size"], lr=cfg["vae.lr"], seed=cfg["run.seed"])
    vae.save(out / "vae")
    (out / "vae_log.tsv").write_text("step\tloss\n" + "".join(f"{i}\t{v:.6f}\n" for i, v in enumerate(losses)))
    return out


def cmd_probe_vae(args, cfg: Config) -> Path:
    out = _out(args)
    vae = VAE.load(args.vae)
    spec = cfg.scene_spec()
    clean = np.stack([render_scene(spec, cfg["run.seed"] + i).sar_clean for i in range(args.count)])
    levels = [float(v) for v in args.speckle.split(",")]
    (out / "probe.tsv").write_text(format_probe(reconstruction_probe(clean, vae, levels, cfg["run.seed"])))
    return out


def cmd_train_set(args, cfg: Config) -> Path:
    out = _out(args)
    vae_dir = Path(args.vae)
    vae = VAE.load(vae_dir)
    checksum = vae.checksum()
    dataset = read_manifest(args.data)
    _, pairs = load_split(dataset, "train", cfg["data.sar_gain"])
    tcfg = cfg.train_config()
    schedule = cfg.schedule()
    cache = build_latent_cache([p.sar for p in pairs], [p.eo for p in pairs], vae, augment=tcfg.augment)
    if args.resume:
        state = Path(args.resume)
        trainer = resume_trainer(state / "state" if (state / "state").is_dir() else state,
                                 cache, schedule, tcfg)
    else:
        model = init_denoiser(cfg["model.base_channels"], cfg["run.seed"], levels=cfg["model.levels"],
                              cond_dim=cfg["model.cond_dim"], latent_channels=vae.latent_channels)
        trainer = Trainer(model, cache, schedule, tcfg)
    trainer.run(log_path=out / "train_log.tsv", checkpoint_dir=out / "state")
    if vae.checksum() != checksum:
        raise RuntimeError("VAE parameters changed during diffusion training")
    checkpoint(trainer, out / "state")
    trainer.model.save(out / "denoiser", {"T": schedule.T})
    if (out / "vae").resolve() != vae_dir.resolve():
        shutil.copytree(vae_dir, out / "vae", dirs_exist_ok=True,
                        ignore=shutil.ignore_patterns("run_manifest.json"))
    return out


def _read_sar(paths: str, gain: float) -> np.ndarray:
    sar = np.concatenate([imageio.read_image(p) for p in paths.split(",")], axis=0)
    return np.clip(sar * np.float32(gain), 0.0, 1.0) if gain != 1.0 else sar


def cmd_sample(args, cfg: Config) -> Path:
    out = _out(args)
    model, vae = _load_run(args.checkpoint)
    schedule = cfg.schedule()
    sar = _read_sar(args.input, cfg["data.sar_gain"])
    steps = args.steps or cfg["sample.steps"]
    scfg = SamplerConfig(make_inference_plan(schedule.T, steps), args.seed, args.export_intermediate)
    res = sample_eo(sar, model, vae, schedule, scfg)
    stem = Path(args.input.split(",")[0]).stem
    imageio.write_image(out / f"{stem}_eo.ppm", np.clip(res.image, 0, 1))
    for t_prev, img in res.intermediates:
        imageio.write_image(out / f"{stem}_t{t_prev:04d}.ppm", np.clip(img, 0, 1))
    if args.export_intermediate or args.dump_latent:
        ptf.save(out / f"{stem}_latent.ptf", res.latent)
    return out


def cmd_confidence_map(args, cfg: Config) -> Path:
    out = _out(args)
    model, vae = _load_run(args.checkpoint)
    schedule = cfg.schedule()
    dataset = read_manifest(args.manifest)
    entry = next((e for e in dataset.entries if e.id == args.pair), None)
    if entry is None:
        raise MissingFilesError(f"pair {args.pair} not in {args.manifest}")
    if not 0.0 < args.t_frac <= 1.0:
        raise ValueError(f"--t-frac must lie in (0, 1], got {args.t_frac}")
    pair = dataset.load(entry, cfg["data.sar_gain"])
    t = max(1, int(round(args.t_frac * schedule.T)))
    conf = confidence_map_at(pair.sar, pair.eo, model, vae, schedule, t, seed=cfg["run.seed"])
    ptf.save(out / f"{args.pair}_conf.ptf", conf)
    heat = upsample_map(conf / max(float(conf.max()), 1e-12))
    imageio.write_image(out / f"{args.pair}_conf.pgm", heat)
    return out


def cmd_sweep_steps(args, cfg: Config) -> Path:
    out = _out(args)
    model, vae = _load_run(args.checkpoint)
    _, pairs = load_split(read_manifest(args.manifest), sar_gain=cfg["data.sar_gain"])
    pairs = pairs[:args.limit] if args.limit else pairs
    steps = [int(s) for s in args.steps_list.split(",") if s.strip()]
    rows = sweep_inference_steps(np.stack([p.sar for p in pairs]), np.stack([p.eo for p in pairs]),
                                 model, vae, cfg.schedule(), steps, seed=cfg["run.seed"])
    (out / "sweep.tsv").write_text(format_sweep(rows))
    return out


def cmd_eval(args, cfg: Config) -> Path:
    out = _out(args)
    model, vae = _load_run(args.checkpoint)
    report = evaluate_manifest(read_manifest(args.manifest), model, vae, cfg.schedule(),
                               steps=args.steps or cfg["sample.steps"], seed=cfg["run.seed"],
                               with_auroc=args.confidence_auroc, sar_gain=cfg["data.sar_gain"])
    write_report(report, out / "report.tsv")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data, "ingest": cmd_ingest, "train-vae": cmd_train_vae,
    "probe-vae": cmd_probe_vae, "train-set": cmd_train_set, "sample": cmd_sample,
    "confidence-map": cmd_confidence_map, "sweep-steps": cmd_sweep_steps, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdiffset", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="section.key = value file (defaults when omitted)")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    sp = add("gen-data", "render a synthetic paired dataset")
    sp.add_argument("--count", type=int, required=True)
    sp = add("ingest", "index a directory pair of SAR/EO images")
    sp.add_argument("--sar-dir", required=True)
    sp.add_argument("--eo-dir", required=True)
    sp = add("train-vae", "train the image codec on EO training images")
    sp.add_argument("--data", required=True, help="dataset manifest.tsv")
    sp = add("probe-vae", "codec reconstruction PSNR against speckle level")
    sp.add_argument("--vae", required=True, help="VAE checkpoint directory")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--speckle", default="0,0.1,0.3,1.0", help="comma-separated speckle variances")
    sp = add("train-set", "train the conditional denoiser")
    sp.add_argument("--data", required=True, help="dataset manifest.tsv")
    sp.add_argument("--vae", required=True, help="VAE checkpoint directory")
    sp.add_argument("--resume", help="earlier train-set output (or its state/ directory)")
    sp = add("sample", "translate one SAR image")
    sp.add_argument("--checkpoint", required=True, help="train-set output directory")
    sp.add_argument("--input", required=True, help="SAR PGM (comma-separated for full polarization)")
    sp.add_argument("--seed", type=int, default=2025)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--export-intermediate", action="store_true")
    sp.add_argument("--dump-latent", action="store_true")
    sp = add("confidence-map", "confidence heat map for a known pair")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--pair", required=True, help="dataset id")
    sp.add_argument("--t-frac", type=float, default=0.5)
    sp = add("sweep-steps", "quality and time against inference step count")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--steps-list", default="1,5,10,25,50")
    sp.add_argument("--limit", type=int, default=0, help="use only the first N test pairs")
    sp = add("eval", "score the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--confidence-auroc", action="store_true")
    return p


def _category(exc: Exception) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, ptf.CheckpointError):
        return "checkpoint"
    if isinstance(exc, (FileNotFoundError, MissingFilesError)):
        return "missing-file"
    if isinstance(exc, (ShapeError, DomainError)):
        return "shape"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, (ValueError, KeyError)):
        return "invalid-input"
    return "runtime"


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    started = time.time()
    try:
        cfg = parse_config(args.config)
        out = COMMANDS[args.command](args, cfg)
        seeds = {"run.seed": cfg["run.seed"]}
        if getattr(args, "seed", None) is not None:
            seeds["sample.seed"] = args.seed
        write_run_manifest(out, ["cdiffset"] + argv, dict(cfg), seeds, started)
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit status 1
        msg = str(exc).replace("\n", " ")
        print(f"error\t{_category(exc)}\t{msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
