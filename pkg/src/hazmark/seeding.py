"""Named, reproducible random streams derived from one root seed.

Every source of randomness in the package draws from a stream identified by
a path of names (e.g. ``("chain", 2)`` or ``("simulate", "inventory")``), so
runs are reproducible regardless of execution order or parallelism.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["rng_stream"]


def _path_key(part):
    digest = hashlib.sha256(repr(part).encode()).digest()
    return int.from_bytes(digest[:4], "big")


def rng_stream(seed, *path):
    """Generator for the named substream ``path`` of the root ``seed``."""
    key = tuple(_path_key(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
