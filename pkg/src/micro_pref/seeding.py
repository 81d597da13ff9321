"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by (seed, *path) so independent parts
of a run (prompts, pairs, labels, restarts, ...) never share state and can be
regenerated in isolation.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
