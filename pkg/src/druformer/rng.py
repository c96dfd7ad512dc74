"""Seedable random-number service.

All stochastic draws (initialisation, scene sampling, shuffling) take a
``numpy.random.Generator`` produced here, so a run is reproducible from its seed.
"""

import numpy as np

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Create a 64-bit PCG generator for ``seed`` and an optional sub-stream path.

    Sub-streams (e.g. ``make_rng(seed, scene_id)``) are statistically independent of
    each other and of the master stream.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ValueError("Seeds and stream ids must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
