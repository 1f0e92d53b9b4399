"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``blake2b(global_seed, purpose,
index)``, so streams are independent of creation order and there is no global
state to leak between episodes or workers.
"""
import hashlib

import numpy as np


def _key(seed, purpose, index):
    h = hashlib.blake2b(f"{int(seed)}|{purpose}|{int(index)}".encode(), digest_size=16)
    return int.from_bytes(h.digest(), "little")


def stream(seed, purpose, index=0):
    return np.random.Generator(np.random.Philox(key=_key(seed, purpose, index)))


def derive_seed(seed, purpose, index=0):
    """A 63-bit integer seed for APIs that take integers (e.g. env.reset)."""
    return _key(seed, purpose, index) & ((1 << 63) - 1)
