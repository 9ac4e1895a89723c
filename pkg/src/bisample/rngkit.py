"""Named, independent random streams derived from one root seed.

Every stochastic component pulls from its own stream so that changing one
experimental factor (batch order, selection fillers, data noise, ...) never
perturbs the draws of another. Streams are stable across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(root_seed: int, *path: str | int) -> np.random.Generator:
    """Return the generator for the stream named by ``path`` under ``root_seed``.

    The same (seed, path) always yields an identical stream; distinct paths
    yield statistically independent ones.
    """
    key: list[int] = []
    for part in path:
        digest = hashlib.sha256(repr(part).encode("utf-8")).digest()
        key.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    seq = np.random.SeedSequence(entropy=root_seed, spawn_key=tuple(key))
    return np.random.default_rng(seq)
