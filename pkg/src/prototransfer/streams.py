"""Deterministic, hierarchical RNG streams.

Every random draw in the package comes from a generator derived from a
master seed and an integer path, so results are independent of execution
order and thread count. Path tags below keep the namespaces of the
different consumers (init, batch sampling, augmentation, ...) disjoint.
"""

from __future__ import annotations

import numpy as np

# Path namespace tags. Values are arbitrary but frozen: changing them
# changes every derived stream.
INIT = 1
BATCH = 2
AUG = 3
EPISODE = 4
SYNTH = 5
RESTRICT = 6
FINETUNE = 7
EVAL = 8
SHUFFLE = 9


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Return an independent generator for (master_seed, path).

    Identical arguments always yield an identical stream; distinct paths
    yield statistically independent streams.
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
