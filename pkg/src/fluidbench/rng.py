"""Deterministic random-stream derivation.

Every stochastic choice in the project draws from a named stream derived
from (root seed, tag words).  Streams with different tags are independent,
and the same (seed, tags) pair always yields the same draws regardless of
what other streams were consumed before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "tag_entropy"]


def tag_entropy(*tags) -> list[int]:
    """Hash a tag tuple into 32-bit words suitable for SeedSequence spawning."""
    h = hashlib.sha256()
    for t in tags:
        h.update(repr(t).encode("utf-8"))
        h.update(b"\x1f")
    d = h.digest()
    return [int.from_bytes(d[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *tags) -> np.random.Generator:
    """Return a fresh Generator for the stream named by (seed, *tags)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(tag_entropy(*tags)))
    return np.random.Generator(np.random.PCG64(ss))
