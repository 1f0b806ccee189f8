"""Deterministic seed derivation.

Every random stream in the package is keyed by a tuple of
(parent seed, role tag, index...) so that results are bit-identical
across runs and independent of how work is scheduled over workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(*parts: int | str) -> int:
    """Mix the given parts into a single uint64 seed.

    String parts are hashed with crc32 so role tags ("g0", "proxy", ...)
    stay stable across runs and platforms.
    """
    words = []
    for part in parts:
        if isinstance(part, str):
            words.append(zlib.crc32(part.encode("utf8")))
        else:
            words.append(int(part))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


def rng_for(*parts: int | str) -> np.random.Generator:
    """A fresh PCG64 generator for the derived seed."""
    return np.random.default_rng(derive_seed(*parts))
