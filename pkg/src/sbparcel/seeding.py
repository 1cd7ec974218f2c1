"""Seed derivation.

Every random draw in the package flows from one user seed. Component seeds
are derived by hashing the seed together with a path of component names, so a
given component always receives the same stream regardless of how many other
components ran before it or in which order.
"""
import hashlib

import numpy as np


def derive_seed(seed, *names):
    """Return a 63-bit integer seed for the component addressed by ``names``.

    >>> derive_seed(0, "restart", 3) == derive_seed(0, "restart", 3)
    True
    """
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed, *names):
    return np.random.default_rng(derive_seed(seed, *names))
