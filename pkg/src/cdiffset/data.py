"""Procedural paired SAR/EO scenes, speckle, augmentation and dataset files.

A scene is a layout of flat-material ellipses and rectangles over a smooth
background. The EO image is an anti-aliased colour render; the SAR image is a
reflectance render of the same layout, shifted by a sub-cell offset and
multiplied by gamma speckle. Temporal discrepancies are extra objects drawn
on top in exactly one modality; the mask marks every pixel whose layout label
differs between the two modalities.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import imageio
from .seeds import DEFAULT_SEED, derive_seed

SUPERSAMPLE = 4
EO_SENSOR_SIGMA = 0.01
POLARIZATIONS = ("hh", "hv", "vh", "vv")
IMAGE_SUFFIXES = (".pgm", ".ppm")
TRAIN_FRACTION = 0.8

# name, EO colour, SAR reflectance
MATERIALS = (
    ("water", (0.10, 0.20, 0.38), 0.05),
    ("forest", (0.13, 0.32, 0.14), 0.32),
    ("grass", (0.35, 0.50, 0.25), 0.40),
    ("soil", (0.50, 0.38, 0.26), 0.45),
    ("concrete", (0.68, 0.68, 0.66), 0.70),
    ("roof", (0.72, 0.32, 0.26), 0.60),
    ("metal", (0.90, 0.90, 0.92), 0.95),
)
BACKGROUND_MATERIALS = (1, 2, 3)
DISCREPANCY_MATERIALS = (0, 4, 5, 6)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    object_count: tuple[int, int] = (3, 12)
    speckle_looks: float = 4.0
    discrepancy_prob: float = 0.3
    misalign_max: float = 4.0
    polarization: str = "single"
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.image_size % 8 or self.image_size < 16:
            raise ValueError(f"image_size must be a multiple of 8 and >= 16, got {self.image_size}")
        lo, hi = self.object_count
        if not 1 <= lo <= hi:
            raise ValueError(f"bad object_count range {self.object_count}")
        if self.speckle_looks <= 0:
            raise ValueError("speckle_looks must be positive")
        if not 0.0 <= self.discrepancy_prob <= 1.0:
            raise ValueError("discrepancy_prob must lie in [0, 1]")
        if not 0 <= self.misalign_max < self.image_size / 8:
            raise ValueError(f"misalign_max must be < image_size/8 = {self.image_size / 8}")
        if self.polarization not in ("single", "full"):
            raise ValueError(f"polarization must be 'single' or 'full', got {self.polarization!r}")

    @property
    def sar_channels(self) -> int:
        return 1 if self.polarization == "single" else 4


@dataclass(frozen=True)
class SceneObject:
    uid: int
    kind: str  # "ellipse" | "rect"
    cx: float
    cy: float
    a: float
    b: float
    angle: float
    rgb: tuple[float, float, float]
    reflectance: float
    pol_gain: tuple[float, float, float, float]
    modality: str = "both"  # "both" | "sar" | "eo"


@dataclass
class ScenePair:
    sar: np.ndarray  # (1 or 4, H, W)
    eo: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (1, H, W), {0, 1}
    misalign_offset: tuple[float, float]
    seed: int
    sar_clean: np.ndarray | None = None
    objects: tuple[SceneObject, ...] = ()
    background: tuple = ()
    transform: int = 0

    @property
    def has_discrepancy(self) -> bool:
        return bool(self.mask.any())


# -- speckle --------------------------------------------------------------
def speckle_field(shape, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma multiplicative speckle with mean 1 and variance 1/looks."""
    if not looks > 0:
        raise ValueError(f"speckle looks must be positive, got {looks}")
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape).astype(np.float32)


def speckle_ceiling(looks: float) -> float:
    """Mean + 3 std of the speckle field; used to map speckled reflectance into [0, 1]."""
    return 1.0 + 3.0 / math.sqrt(looks)


# -- layout ---------------------------------------------------------------
def _sample_object(rng: np.random.Generator, uid: int, size: int, material: int,
                   half_range: tuple[float, float], modality: str = "both") -> SceneObject:
    scale = size / 64.0
    a, b = rng.uniform(half_range[0], half_range[1], 2) * scale
    margin = 0.5 * min(a, b)
    cx, cy = rng.uniform(margin, size - margin, 2)
    _, rgb, refl = MATERIALS[material]
    rgb = tuple(float(np.clip(c + rng.uniform(-0.05, 0.05), 0.0, 1.0)) for c in rgb)
    refl = float(np.clip(refl * rng.uniform(0.9, 1.1), 0.01, 1.0))
    g = rng.uniform(0.8, 1.2, 3)
    return SceneObject(
        uid=uid,
        kind="ellipse" if rng.random() < 0.5 else "rect",
        cx=float(cx), cy=float(cy), a=float(a), b=float(b),
        angle=float(rng.uniform(0, math.pi)),
        rgb=rgb, reflectance=refl,
        pol_gain=(float(g[0]), float(g[1]), float(g[1]), float(g[2])),
        modality=modality,
    )


def _inside(obj: SceneObject, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy = xs - obj.cx, ys - obj.cy
    c, s = math.cos(obj.angle), math.sin(obj.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    if obj.kind == "ellipse":
        return (u / obj.a) ** 2 + (v / obj.b) ** 2 <= 1.0
    return (np.abs(u) <= obj.a) & (np.abs(v) <= obj.b)


def _grid(size: int, offset=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    s = size * SUPERSAMPLE
    coords = (np.arange(s) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(coords - offset[1], coords - offset[0], indexing="ij")
    return xs, ys


def layout_labels(objects: Sequence[SceneObject], size: int, modality: str,
                  offset=(0.0, 0.0)) -> np.ndarray:
    """Supersampled label map: uid of the topmost object per sample, 0 = background."""
    xs, ys = _grid(size, offset)
    labels = np.zeros(xs.shape, dtype=np.int32)
    for obj in objects:
        if obj.modality in ("both", modality):
            labels[_inside(obj, xs, ys)] = obj.uid
    return labels


def _box_down(img: np.ndarray, size: int) -> np.ndarray:
    lead = img.shape[:-2]
    return img.reshape(*lead, size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(-3, -1))


def _background_field(bg: tuple, size: int, offset=(0.0, 0.0)) -> np.ndarray:
    _, gx, gy = bg
    xs, ys = _grid(size, offset)
    return gx * (xs / size - 0.5) + gy * (ys / size - 0.5)


def _paint(labels: np.ndarray, objects: Sequence[SceneObject], base: np.ndarray,
           ramp: np.ndarray, values) -> np.ndarray:
    """Fill per-label values: background is ``base + ramp``, objects are flat."""
    out = base[:, None, None] + ramp[None]
    for obj in objects:
        sel = labels == obj.uid
        if sel.any():
            out[:, sel] = np.asarray(values(obj), dtype=np.float64)[:, None]
    return out


def discrepancy_mask(objects: Sequence[SceneObject], size: int) -> np.ndarray:
    eo = layout_labels(objects, size, "eo")
    sar = layout_labels(objects, size, "sar")
    diff = (eo != sar).reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).any(axis=(1, 3))
    return diff[None].astype(np.float32)


def render_scene(spec: SceneSpec, seed: int) -> ScenePair:
    size = spec.image_size
    layout_ss, disc_ss, speckle_ss, noise_ss = np.random.SeedSequence(seed).spawn(4)
    rng = np.random.default_rng(layout_ss)

    bg_mat = int(rng.choice(BACKGROUND_MATERIALS))
    background = (bg_mat, float(rng.uniform(-0.06, 0.06)), float(rng.uniform(-0.06, 0.06)))
    lo, hi = spec.object_count
    n_obj = int(rng.integers(lo, hi + 1))
    objects = []
    for uid in range(1, n_obj + 1):
        material = int(rng.integers(len(MATERIALS)))
        objects.append(_sample_object(rng, uid, size, material, (3.0, 12.0)))
    offset = tuple(float(v) for v in rng.uniform(-spec.misalign_max, spec.misalign_max, 2))

    drng = np.random.default_rng(disc_ss)
    if drng.random() < spec.discrepancy_prob:
        modality = "sar" if drng.random() < 0.5 else "eo"
        for k in range(int(drng.integers(1, 3))):
            material = int(drng.choice(DISCREPANCY_MATERIALS))
            # >= 3 latent cells across so the discrepancy survives 1/8 downsampling
            objects.append(_sample_object(drng, n_obj + 1 + k, size, material, (12.0, 16.0), modality))
    objects = tuple(objects)

    _, bg_rgb, bg_refl = MATERIALS[bg_mat]
    # EO
    eo_labels = layout_labels(objects, size, "eo")
    eo_ramp = _background_field(background, size)
    eo = _box_down(_paint(eo_labels, objects, np.asarray(bg_rgb), eo_ramp, lambda o: o.rgb), size)
    eo = eo + np.random.default_rng(noise_ss).normal(0.0, EO_SENSOR_SIGMA, eo.shape)
    eo = np.clip(eo, 0.0, 1.0).astype(np.float32)

    # SAR: same layout, shifted by the misalignment offset
    sar_labels = layout_labels(objects, size, "sar", offset)
    sar_ramp = _background_field(background, size, offset)
    if spec.polarization == "single":
        base = np.array([bg_refl])
        value = lambda o: (o.reflectance,)  # noqa: E731
    else:
        base = np.array([bg_refl] * 4)
        value = lambda o: tuple(o.reflectance * g for g in o.pol_gain)  # noqa: E731
    refl = np.clip(_box_down(_paint(sar_labels, objects, base, sar_ramp, value), size), 0.0, 1.0)
    speckle = speckle_field(refl.shape, spec.speckle_looks, np.random.default_rng(speckle_ss))
    sar = np.clip(refl * speckle / speckle_ceiling(spec.speckle_looks), 0.0, 1.0).astype(np.float32)

    mask = discrepancy_mask(objects, size)
    return ScenePair(sar=sar, eo=eo, mask=mask, misalign_offset=offset, seed=int(seed),
                     sar_clean=refl.astype(np.float32), objects=objects, background=background)


# -- augmentation ---------------------------------------------------------
def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` of D4 acting on the two trailing axes (0 = identity, 4..7 add a flip)."""
    out = np.rot90(arr, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(k: int) -> int:
    return (4 - k) % 4 if k < 4 else k


def augment(pair: ScenePair, rng: np.random.Generator) -> ScenePair:
    h, w = pair.eo.shape[-2:]
    if h != w:
        raise ValueError(f"augment needs square images, got {h}x{w}")
    k = int(rng.integers(8))
    return apply_transform(pair, k)


def apply_transform(pair: ScenePair, k: int) -> ScenePair:
    return replace(
        pair,
        sar=dihedral(pair.sar, k),
        eo=dihedral(pair.eo, k),
        mask=dihedral(pair.mask, k),
        sar_clean=None if pair.sar_clean is None else dihedral(pair.sar_clean, k),
        transform=k,
    )


# -- dataset files --------------------------------------------------------
@dataclass(frozen=True)
class ManifestEntry:
    id: str
    split: str
    sar_paths: tuple[str, ...]
    eo_path: str
    mask_path: str | None
    seed: int | None
    has_discrepancy: bool | None


@dataclass
class Dataset:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def load(self, entry: ManifestEntry, sar_gain: float = 1.0) -> ScenePair:
        sar = np.concatenate([imageio.read_image(self.root / p) for p in entry.sar_paths], axis=0)
        if sar_gain != 1.0:
            sar = np.clip(sar * np.float32(sar_gain), 0.0, 1.0)
        eo = imageio.read_image(self.root / entry.eo_path)
        if entry.mask_path:
            mask = (imageio.read_image(self.root / entry.mask_path) > 0.5).astype(np.float32)
        else:
            mask = np.zeros((1,) + eo.shape[1:], dtype=np.float32)
        return ScenePair(sar=sar, eo=eo, mask=mask, misalign_offset=(0.0, 0.0), seed=entry.seed or 0)

    def missing_files(self) -> list[str]:
        bad = []
        for e in self.entries:
            paths = list(e.sar_paths) + [e.eo_path] + ([e.mask_path] if e.mask_path else [])
            if any(not (self.root / p).exists() for p in paths):
                bad.append(e.id)
        return bad


MANIFEST_HEADER = "# id\tsplit\tsar_path\teo_path\tmask_path\tseed\thas_discrepancy"


def assign_splits(ids: Iterable[str], seed: int = DEFAULT_SEED) -> dict[str, str]:
    """Deterministic 80/20 train/test split over sorted ids."""
    ids = sorted(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(TRAIN_FRACTION * len(ids)))
    train = {ids[i] for i in order[:n_train]}
    return {i: ("train" if i in train else "test") for i in ids}


def write_manifest(path: Path, entries: Sequence[ManifestEntry]) -> Path:
    lines = [MANIFEST_HEADER]
    for e in entries:
        lines.append("\t".join([
            e.id, e.split, ",".join(e.sar_paths), e.eo_path, e.mask_path or "-",
            "-" if e.seed is None else str(e.seed),
            "-" if e.has_discrepancy is None else str(int(e.has_discrepancy)),
        ]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 7:
            raise ValueError(f"{path}:{n}: expected 7 tab-separated fields, got {len(cols)}")
        id_, split, sar, eo, mask, seed, disc = cols
        entries.append(ManifestEntry(
            id=id_, split=split, sar_paths=tuple(sar.split(",")), eo_path=eo,
            mask_path=None if mask == "-" else mask,
            seed=None if seed == "-" else int(seed),
            has_discrepancy=None if disc == "-" else bool(int(disc)),
        ))
    return Dataset(path.parent, entries)


def scene_seed(spec: SceneSpec, index: int) -> int:
    return derive_seed(spec.seed, "scene", index)


def write_dataset(spec: SceneSpec, count: int, out_dir: str | Path,
                  workers: int | None = None) -> tuple[Path, list[Path]]:
    """Render ``count`` scenes into ``out_dir``; returns (manifest path, all written files)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out_dir)
    for sub in ("sar", "eo", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = [f"scene_{i:05d}" for i in range(count)]
    splits = assign_splits(ids, spec.seed)

    def build(i: int):
        seed = scene_seed(spec, i)
        return i, seed, render_scene(spec, seed)

    workers = workers or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rendered = list(pool.map(build, range(count)))
    else:
        rendered = [build(i) for i in range(count)]

    written: list[Path] = []
    entries = []
    for (i, seed, pair), id_ in zip(rendered, ids):
        if spec.polarization == "single":
            sar_paths = (f"sar/{id_}.pgm",)
        else:
            sar_paths = tuple(f"sar/{id_}_{p}.pgm" for p in POLARIZATIONS)
        for ch, rel in enumerate(sar_paths):
            written.append(imageio.write_image(out / rel, pair.sar[ch:ch + 1]))
        written.append(imageio.write_image(out / f"eo/{id_}.ppm", pair.eo))
        written.append(imageio.write_image(out / f"mask/{id_}.pgm", pair.mask))
        entries.append(ManifestEntry(id_, splits[id_], sar_paths, f"eo/{id_}.ppm",
                                     f"mask/{id_}.pgm", seed, pair.has_discrepancy))
    manifest = write_manifest(out / "manifest.tsv", entries)
    written.append(manifest)
    return manifest, written


def ingest_paired_dir(sar_dir: str | Path, eo_dir: str | Path, out_dir: str | Path | None = None,
                      seed: int = DEFAULT_SEED) -> Dataset:
    """Pair same-stem images across two directories and split them 80/20.

    Pairs are assumed to be co-registered already. SAR files must be
    single-channel PGM; EO files 3-channel PPM.
    """
    sar_dir, eo_dir = Path(sar_dir), Path(eo_dir)

    def stems(d: Path) -> dict[str, Path]:
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    sar, eo = stems(sar_dir), stems(eo_dir)
    unpaired = sorted(set(sar) ^ set(eo))
    if unpaired:
        side = "SAR" if unpaired[0] in sar else "EO"
        raise ValueError(f"unpaired filename: {unpaired[0]} ({side} only)")
    if not sar:
        raise ValueError(f"no images found in {sar_dir}")
    root = Path(out_dir) if out_dir is not None else sar_dir.parent
    splits = assign_splits(sar, seed)
    entries = []
    for stem in sorted(sar):
        s_img = imageio.read_image(sar[stem])
        e_img = imageio.read_image(eo[stem])
        if s_img.shape[0] != 1 or e_img.shape[0] != 3:
            raise ValueError(f"{stem}: expected 1-channel SAR and 3-channel EO")
        if s_img.shape[1:] != e_img.shape[1:]:
            raise ValueError(f"{stem}: SAR {s_img.shape[1:]} and EO {e_img.shape[1:]} sizes differ")
        if s_img.shape[1] % 8 or s_img.shape[2] % 8:
            raise ValueError(f"{stem}: size {s_img.shape[1:]} not divisible by 8")
        entries.append(ManifestEntry(
            stem, splits[stem], (os.path.relpath(sar[stem], root),),
            os.path.relpath(eo[stem], root), None, None, None,
        ))
    ds = Dataset(root, entries)
    if out_dir is not None:
        root.mkdir(parents=True, exist_ok=True)
        write_manifest(root / "manifest.tsv", entries)
    return ds
