"""Named seed derivation: every random stream is (global seed, purpose, index...)."""
from __future__ import annotations

import zlib

import numpy as np

DEFAULT_SEED = 2025


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_seed(seed: int, *purpose) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [_key(p) for p in purpose])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, *purpose) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *purpose))
