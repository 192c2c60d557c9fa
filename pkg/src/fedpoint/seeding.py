"""Named random substreams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "STREAMS"]

STREAMS = ("data", "init", "sampling", "dda", "split", "eval")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``.

    Streams with different names or keys never share state, so turning one
    feature on or off does not shift the draws of another.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, keys)]))
