"""Seed derivation and RNG construction.

One master seed drives every command; each consumer derives its own named
sub-seed so changing e.g. the LIME sampling cannot perturb data generation.
PCG64 gives identical draw sequences across platforms for a fixed seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, name: str) -> int:
    """Stable 64-bit sub-seed for ``name`` under ``master``."""
    digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))
