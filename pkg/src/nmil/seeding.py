"""Deterministic RNG streams keyed by (seed, purpose, indices...).

Strings are folded to 64-bit ints with blake2s so stream derivation is
stable across processes and platforms (python's builtin hash is salted).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def key_ints(*parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, (bool, int, np.integer)):
            out.append(int(p) & _MASK)
        else:
            digest = hashlib.blake2s(str(p).encode("utf-8"), digest_size=8).digest()
            out.append(int.from_bytes(digest, "little"))
    return out


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(key_ints(*parts)))


def fold_seed(*parts) -> int:
    """Collapse a key tuple to a single reproducible integer seed."""
    return int(np.random.SeedSequence(key_ints(*parts)).generate_state(1, np.uint64)[0])
