"""Counter-based Gaussian variates.

The normal vector for (seed, step, path) is a pure function of those three
integers: a Philox generator keyed by (seed, step) is positioned at counter
block ``path``, whose four 64-bit words become four standard normals.  No
state is shared, so any partition of paths across workers reproduces the
same numbers.
"""

import numpy as np
from scipy.special import ndtri

WORDS_PER_PATH = 4
_MASK64 = (1 << 64) - 1


def _uniform(raw: np.ndarray) -> np.ndarray:
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def normals(seed: int, step: int, start: int, stop: int, dim: int) -> np.ndarray:
    """Standard normals for paths ``start..stop-1`` at ``step``, shape ``(stop - start, dim)``."""
    if not 1 <= dim <= WORDS_PER_PATH:
        raise ValueError(f"dim must lie in [1, {WORDS_PER_PATH}]")
    count = stop - start
    if count <= 0:
        return np.zeros((0, dim))
    key = np.array([seed & _MASK64, step & _MASK64], dtype=np.uint64)
    counter = np.array([start, 0, 0, 0], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=counter)
    raw = bitgen.random_raw(WORDS_PER_PATH * count).reshape(count, WORDS_PER_PATH)
    return ndtri(_uniform(raw[:, :dim]))
