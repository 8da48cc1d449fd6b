"""Deterministic RNG derivation.

Every stochastic step in the pipeline draws from a generator derived from the
master seed plus a domain tag and structural indices, so results do not depend
on execution order or parallelism.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams for unrelated purposes disjoint even when the
# structural indices collide.
INIT = 1
SHUFFLE = 2
DROPOUT = 3
MIX = 4
MC_PASS = 5
CORPUS = 6


def derive_rng(master_seed: int, tag: int, *indices: int) -> np.random.Generator:
    """Return a generator uniquely determined by (master_seed, tag, indices)."""
    entropy = [int(master_seed) & 0xFFFFFFFFFFFFFFFF, int(tag)] + [int(i) for i in indices]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
