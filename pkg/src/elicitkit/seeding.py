"""Hierarchical seed derivation.

Every random stream in an experiment is derived from one root seed plus a
tuple of integer keys, e.g. ``(seed, fold, size, source)``.  The mapping
uses :class:`numpy.random.SeedSequence` spawn keys, so rerunning a single
cell reproduces exactly the stream it had inside the full run.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=tuple(int(k) for k in keys))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def name_key(name: str) -> int:
    """Stable 32-bit integer for a string label (prior-source names etc.)."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
