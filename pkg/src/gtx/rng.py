"""Named random substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _word(k) -> int:
    return zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF


def substream(root: int, name: str, *keys) -> np.random.Generator:
    """Independent generator for ``(root, name, *keys)``.

    Keys may be integers or strings.  Streams with different names never share draws, so adding randomness in one
    module cannot shift the draws of another.
    """
    entropy = [int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())] + [_word(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
