"""Named random substreams derived from one master seed."""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "stream_key"]


def stream_key(*keys) -> tuple:
    """Map a mixed sequence of strings and non-negative ints to integer words."""
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode("utf-8")))
        elif isinstance(k, (int, np.integer)) and k >= 0:
            out.append(int(k))
        else:
            raise TypeError(f"substream key must be str or non-negative int, got {k!r}")
    return tuple(out)


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Independent generator for ``(master_seed, *keys)``.

    The same keys always give the same stream, regardless of how many other
    streams were drawn before.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=stream_key(*keys))
    return np.random.Generator(np.random.PCG64(ss))
