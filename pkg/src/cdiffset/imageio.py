"""8-bit binary PGM (P5) / PPM (P6) reading and writing.

Arrays are float in [0, 1], shaped (C, H, W) with C = 1 for PGM, 3 for PPM.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c == 1:
        magic, payload = b"P5", to_u8(img[0])
    elif c == 3:
        magic, payload = b"P6", to_u8(img).transpose(1, 2, 0)
    else:
        raise ValueError(f"PGM/PPM need 1 or 3 channels, got {c}")
    path = Path(path)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(payload).tobytes())
    return path


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    toks, i = [], 0
    while len(toks) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        toks.append(buf[i:j])
        i = j
    return toks, i + 1  # exactly one whitespace byte after maxval


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
        (magic, w, h, maxval), start = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (OSError, ValueError, IndexError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from None
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"unreadable image {path}: only 8-bit P5/P6 supported")
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, offset=start)
    if data.size != c * h * w:
        raise ValueError(f"unreadable image {path}: payload size mismatch")
    img = data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(img)
