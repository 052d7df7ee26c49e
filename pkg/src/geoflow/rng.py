"""Seeded random streams.

Everything random goes through Philox-4x64 (a counter-based generator with
published constants), so a seed gives the same stream on every platform.
"""

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``; extra integers select independent sub-streams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])))
