"""Keyed seed splitting.

Every random stream in a run is derived from the master seed and a tuple of
names/indices, e.g. ``("packet", client, round)``. The key is hashed with
BLAKE2b, so streams are independent of the order in which they are requested
and changing one key never perturbs another stream.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *key) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"modiad-seed")
    h.update(str(int(master)).encode())
    for part in key:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master: int, *key) -> np.random.Generator:
    """Return a fresh PCG64 generator for ``(master, *key)``."""
    return np.random.default_rng(derive_seed(master, *key))
