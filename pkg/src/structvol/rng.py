"""Counter-based seed derivation.

Every stochastic draw in the package comes from ``generator(seed, *key)``,
where ``key`` names the draw (item index, step, purpose tag). Two calls with
the same seed and key yield the same stream no matter which order or thread
they run in.
"""

import numpy as np

# purpose tags, kept small and stable: changing one changes every artifact
INIT = 0
STEP = 1
ITEM = 2
NONRIGID = 3
TEMPLATE = 4
BATCH = 5
PARAMS = 6
TRAIN = 7


def generator(seed, *key):
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def child_seed(seed, *key):
    """Derive a fresh 64-bit seed from ``seed`` and ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
