"""Deterministic seed derivation.

Every stage of the pipeline (synthesis, init, shuffling, dropout, splits)
draws from its own generator derived from one top-level seed plus a string
label, so adding a consumer never perturbs the streams of the others.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_seed(seed: int, label: str) -> np.random.SeedSequence:
    """Child seed sequence for `label`, stable across runs and platforms."""
    return np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Generator seeded from (seed, label)."""
    return np.random.default_rng(derive_seed(seed, label))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n independent child generators of `rng`."""
    return rng.spawn(n)
