"""Deterministic seed derivation.

Every stage draws from its own stream derived from (root seed, *tags) so
reordering or skipping stages never shifts another stage's randomness.
"""

import hashlib

import numpy as np


def mix_seed(root, *tags):
    """Collapse a root seed plus string/int tags into a stable u64."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def stream(root, *tags):
    """A numpy Generator seeded from (root, *tags)."""
    return np.random.default_rng(mix_seed(root, *tags))
