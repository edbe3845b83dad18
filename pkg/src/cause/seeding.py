"""One root seed, split into independent streams by fixed labels."""
from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]))


def derive_seed(seed: int, label: str) -> int:
    return int(derive_rng(seed, label).integers(2**31 - 1))
