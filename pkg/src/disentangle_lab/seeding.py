"""Named random sub-streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(root: int, name: str, *index: int) -> np.random.Generator:
    """Generator for ``(root, name, *index)``; independent of call order elsewhere."""
    return np.random.default_rng([int(root), stream_key(name), *(int(i) for i in index)])


def derive_seed(root: int, name: str, *index: int) -> int:
    return int(substream(root, name, *index).integers(0, 2**31 - 1))
