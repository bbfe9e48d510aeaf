"""Labeled random streams derived from one top-level seed.

Each purpose ("init", "data", "kmeans", ...) gets its own Philox stream keyed
by a stable hash of its label, so adding a consumer never shifts the draws
of another.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, label, *extra)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_label_key(label), *map(int, extra)))
    return np.random.Generator(np.random.Philox(ss))
