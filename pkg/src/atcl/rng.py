"""Reproducible random streams.

All randomness is drawn from numpy's Philox counter-based bit generator,
keyed by a 64-bit run seed and a spawn key naming the stream, e.g.
``stream(seed, "shuffle", epoch)`` or ``stream(seed, "attack", epoch, batch)``.
Streams never share state, so reordering or parallelising work keeps the
draws of every other stream unchanged.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def stream(seed: int, *key) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(_tag(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
