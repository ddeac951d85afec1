"""Counter-based seed derivation.

Every stochastic routine takes an integer seed. Child streams are derived from
``(seed, *keys)`` through :class:`numpy.random.SeedSequence`, so stream ``i`` does
not depend on how many other streams were created before it.
"""

from __future__ import annotations

import numpy as np


def derive_seed(seed: int, *keys: int) -> int:
    """Return a 63-bit integer seed for the child stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 31) ^ int(lo)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    if keys:
        return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))
    return np.random.default_rng(int(seed))
