"""Named random substreams derived from a single root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``.

    Names may be strings or integers; the mapping is stable across runs and
    platforms, so e.g. ``substream(7, "sim", "pool", "M00012")`` always yields
    the same draws regardless of which other streams were consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)
