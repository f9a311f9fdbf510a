"""Counter-style RNG streams: one independent generator per (seed, *key)."""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Generator for ``seed`` and a spawn key such as (replica, detector).

    Streams for distinct keys are statistically independent and do not depend
    on the order in which they are created.
    """
    if seed is None:
        raise ValueError("an explicit seed is required")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


# Stream namespaces, so that modules never collide on a key.
ALICE = 1
CHANNEL = 2
BOB_PRIME = 3
FSG = 4
BOB = 5
SIFT = 6
SWEEP = 7
MATRIX = 8
