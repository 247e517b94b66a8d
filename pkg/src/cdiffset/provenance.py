"""Run manifests: what was run, with which settings, and checksums of every output."""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Iterable

from . import __version__

MANIFEST_NAME = "run_manifest.json"


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def collect_outputs(out_dir: Path) -> list[Path]:
    return sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)


def write_run_manifest(out_dir: str | Path, argv: list[str], config: dict, seeds: dict,
                       started: float, files: Iterable[Path] | None = None) -> Path:
    """Write ``run_manifest.json`` listing ``files`` (default: everything under ``out_dir``)."""
    out_dir = Path(out_dir)
    files = collect_outputs(out_dir) if files is None else sorted(set(Path(f) for f in files))
    record = {
        "tool": "cdiffset",
        "version": __version__,
        "command": argv,
        "config": config,
        "seeds": seeds,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "artifacts": {str(p.relative_to(out_dir)): sha256_file(p) for p in files},
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def verify_run_manifest(out_dir: str | Path) -> list[str]:
    """Relative paths whose checksum no longer matches (or that vanished)."""
    out_dir = Path(out_dir)
    record = json.loads((out_dir / MANIFEST_NAME).read_text())
    bad = []
    for rel, digest in record["artifacts"].items():
        p = out_dir / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
