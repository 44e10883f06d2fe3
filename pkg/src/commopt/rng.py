"""Deterministic random-stream derivation.

Every stochastic component draws from a generator addressed by
``(master seed, domain, *indices)``.  Streams for distinct clients and
rounds are independent, so simulations are reproducible bit for bit no
matter in which order clients are evaluated.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams for different purposes disjoint.
COMPRESS = 0   # per-(client, round) compressor draws
COIN = 1       # per-round shared communication coin
COHORT = 2     # per-round cohort sampling
SAMPLE = 3     # per-(client, round) single-sample gradient picks
ESTIMATE = 4   # empirical compressor certification
PARTITION = 5  # dataset partitioning
MISC = 6


def stream(seed: int, *key: int) -> np.random.Generator:
    """Return the PCG64 generator addressed by ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
