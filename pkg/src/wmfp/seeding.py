"""One global seed fanned out to independent, labelled sub-streams."""

from __future__ import annotations

import hashlib

import numpy as np


def subseed(seed: int, label: str) -> int:
    """Derive a 64-bit seed for ``label`` from ``seed`` via SHA-256."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, label))
