"""Counter-based random streams keyed by (master seed, purpose, coordinates).

Each stream is a Philox generator whose key is derived from the master seed
and a spawn key built from a purpose tag and integer coordinates.  Any
sub-stream can therefore be regenerated on its own, in any order and on any
thread, and will produce the same numbers.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def _zigzag(v: int) -> int:
    v = int(v)
    return 2 * v if v >= 0 else -2 * v - 1


def seed_sequence(seed: int, tag: str, *coords) -> np.random.SeedSequence:
    key = (_tag_id(tag),) + tuple(_zigzag(c) for c in _flatten(coords))
    return np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=key)


def stream(seed: int, tag: str, *coords) -> np.random.Generator:
    """Independent generator for ``(seed, tag, *coords)``.

    ``coords`` may contain ints or int sequences (e.g. a lattice coordinate);
    negative values are allowed.
    """
    return np.random.Generator(np.random.Philox(seed_sequence(seed, tag, *coords)))


def child_seed(seed: int, tag: str, *coords) -> int:
    """A 64-bit seed for a derived experiment (e.g. one repetition of a sweep)."""
    words = seed_sequence(seed, tag, *coords).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def _flatten(coords):
    for c in coords:
        if isinstance(c, (list, tuple, np.ndarray)):
            yield from _flatten(c)
        else:
            yield c


def rep_seed(seed: int, r: int) -> int:
    """Instance seed of repetition ``r``: the master seed itself for ``r = 0``.

    Repetition 0 of any sweep therefore reproduces a single run at ``seed``.
    """
    return int(seed) if r == 0 else child_seed(seed, "rep", r)
