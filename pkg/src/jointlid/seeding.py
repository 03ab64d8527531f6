"""Named random substreams derived from a single root seed."""

import zlib

import numpy as np


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``.

    Names are hashed with CRC-32 so the mapping is stable across processes
    and Python versions (unlike ``hash``).
    """
    key = [int(seed), zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) for i in index)
    return np.random.default_rng(key)
