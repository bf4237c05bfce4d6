"""Named random streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; names may be str or int."""
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(name.encode()) if isinstance(name, str) else int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
