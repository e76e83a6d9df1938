"""Seed derivation.

Every random stream is a Philox generator keyed by (seed, purpose, index), so
a chain's or start's draws do not depend on how many siblings run alongside
it.  Purposes map to fixed integers; never renumber them.
"""

import numpy as np

PURPOSES = {
    "em": 1,
    "min_entropy": 2,
    "gibbs": 3,
    "master_batch": 4,
    "replicate_batch": 5,
    "elppd": 6,
    "scale_mixture": 7,
    "synthetic": 8,
}


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    key = (PURPOSES[purpose],) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
