"""PTF1 tensor files and tensor-directory checkpoints.

File layout: ``b"PTF1"``, one dtype byte (0 = little-endian float32), one rank
byte ``r``, ``r`` little-endian uint32 dims, then the row-major payload.

A tensor directory holds one ``<name>.ptf`` per tensor plus ``manifest.txt``
with ``key = value`` metadata lines followed by ``tensor <name> <d0>x<d1>...``
lines.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PTF1"
DTYPE_F32 = 0
MANIFEST = "manifest.txt"


class CheckpointError(IOError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.array(array, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    if arr.ndim > 255:
        raise ValueError("PTF1 supports rank <= 255")
    header = MAGIC + bytes([DTYPE_F32, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic, not a PTF1 file")
    if buf[4] != DTYPE_F32:
        raise CheckpointError(f"{source}: unsupported dtype code {buf[4]}")
    rank = buf[5]
    end = 6 + 4 * rank
    if len(buf) < end:
        raise CheckpointError(f"{source}: truncated header")
    shape = struct.unpack(f"<{rank}I", buf[6:end])
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - end != expected:
        raise CheckpointError(f"{source}: payload has {len(buf) - end} bytes, shape {shape} needs {expected}")
    return np.frombuffer(buf, dtype="<f4", offset=end).reshape(shape).astype(np.float32)


def save(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing tensor file {path}")
    return decode(path.read_bytes(), str(path))


def save_dir(directory: str | Path, tensors: Mapping[str, np.ndarray],
             meta: Mapping[str, object] | None = None) -> list[Path]:
    """Write tensors plus manifest; returns the written paths (manifest last)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    lines = [f"{k} = {v}" for k, v in (meta or {}).items()]
    for name, arr in tensors.items():
        p = directory / f"{name}.ptf"
        save(p, arr)
        written.append(p)
        dims = "x".join(str(d) for d in np.shape(arr)) or "scalar"
        lines.append(f"tensor {name} {dims}")
    man = directory / MANIFEST
    man.write_text("\n".join(lines) + "\n")
    written.append(man)
    return written


def load_dir(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    man = directory / MANIFEST
    if not man.exists():
        raise CheckpointError(f"missing checkpoint: no {MANIFEST} in {directory}")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for line in man.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("tensor "):
            _, name, dims = line.split()
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            arr = load(directory / f"{name}.ptf")
            if arr.shape != shape:
                raise CheckpointError(f"{name}: manifest says {shape}, file holds {arr.shape}")
            tensors[name] = arr
        else:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return tensors, meta
