"""Seeded, splittable random streams.

Every source of randomness in the package is a counter-based Philox
generator keyed by (global_seed, stream ids...). The same key always
yields the same stream, independent of how many other streams exist.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF


def _as_key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8")) & _MASK32
    return int(part) & _MASK32


def stream(seed, *ids) -> np.random.Generator:
    """Independent generator for (seed, *ids). Ids may be ints or short strings."""
    ss = np.random.SeedSequence(entropy=_as_key(seed), spawn_key=tuple(_as_key(i) for i in ids))
    return np.random.Generator(np.random.Philox(ss))
