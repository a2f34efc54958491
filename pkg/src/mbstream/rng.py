"""Named, counter-based random substreams.

A single experiment seed fans out into independent streams, one per
consumer ("init/layer0.weight", "data/classification", "shuffle/epoch3", ...).
Each stream is a Philox generator keyed by a SHA-256 digest of
``"{seed}/{name}"``, so adding or removing one consumer never perturbs the
numbers another consumer sees, and the same (seed, name) pair reproduces the
same stream on any platform.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    """128-bit Philox key derived from a seed and a stream name."""
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    digest = hashlib.sha256(f"{seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the experiment seed."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))
