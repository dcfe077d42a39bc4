"""Derived random streams.

Every random draw in the package comes from a generator keyed by
(master seed, purpose, *indices).  No shared stateful generator exists,
so results never depend on execution order or thread scheduling.
"""

import numpy as np

# Purpose tags.  Distinct tags keep streams for different jobs disjoint
# even when their index tuples collide.
INIT = 1          # parameter initialization, keyed by layer index
SYNTH = 2         # synthetic dataset noise
SYNTH_TEST = 3    # held-out synthetic test set
PARTITION = 4     # client partitioning
BATCH = 5         # minibatch shuffling, keyed by (client, round, epoch)
PERMUTE = 6       # client permutations in sequential server processing
CENTRAL_BATCH = 7 # pooled-data shuffling, keyed by (round, epoch)
PROBE = 8         # smoothness probing directions


def rng_for(master_seed: int, purpose: int, *indices: int) -> np.random.Generator:
    """Generator for one (seed, purpose, indices) stream."""
    if master_seed < 0:
        raise ValueError(f"master seed must be nonnegative, got {master_seed}")
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed), int(purpose), *[int(i) for i in indices]])
    )
