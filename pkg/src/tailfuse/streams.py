"""Counter-based random streams addressed by (master seed, path).

Every stream is a Philox generator whose key is hashed from the master seed and
an integer path such as ``(run, replicate)``. Streams are therefore fixed by
their address alone, never by the order in which workers happen to request
them.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _entropy(seed: int, path: tuple[int, ...]) -> list[int]:
    return [int(seed) & _MASK64, *(int(p) & _MASK64 for p in path)]


def stream(seed: int, *path: int) -> np.random.Generator:
    key = np.random.SeedSequence(_entropy(seed, path)).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *path: int) -> int:
    """A 64-bit child seed for handing a sub-task its own master seed."""
    state = np.random.SeedSequence(_entropy(seed, path)).generate_state(1, np.uint64)
    return int(state[0])


# Fixed domain tags keep streams for different purposes disjoint even when
# they share a master seed.
FUSION = 1
SUBSAMPLE = 2
REFERENCE = 3
HARNESS = 4
PICK = 5
