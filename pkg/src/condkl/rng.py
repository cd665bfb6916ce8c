"""Counter-keyed random streams.

Each realization gets its own Philox generator keyed by ``(seed, *key)``,
so draws never depend on which worker produced them or in what order.
"""

import numpy as np


def substream(seed, *key) -> np.random.Generator:
    entropy = [int(seed)] + [int(k) for k in key]
    if any(e < 0 for e in entropy):
        raise ValueError("seeds and stream keys must be nonnegative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def standard_normals(seed, stream, start, count, dim) -> np.ndarray:
    """Rows ``start .. start+count-1`` of the ``N(0, I_dim)`` sequence ``stream``."""
    out = np.empty((count, dim))
    for row in range(count):
        out[row] = substream(seed, stream, start + row).standard_normal(dim)
    return out


def derive_seed(seed, *key) -> int:
    """A 63-bit seed for a named sub-task, e.g. ``derive_seed(s, TAG, step)``."""
    entropy = [int(seed)] + [int(k) for k in key]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1
