"""Seeded random streams.

Every Monte Carlo routine draws from one stream per replica.  A stream is
identified by ``(seed_base, label)`` which is hashed into a 32-bit key; the
replica index is then mixed into the key inside the compiled kernels.  Results
therefore depend only on the seed, the label and the replica index, never on
thread scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np

# Labels used by the estimators.  Estimators that must share paths (the
# discounted and undiscounted excursion sums) use the same label on purpose.
EXCURSION = "excursion"
RENEWAL = "renewal"
DRIFT_NEGATIVE = "drift-negative"
DRIFT_POSITIVE = "drift-positive"
PATHS = "paths"
LADDER = "ladder"
REJECTION = "geometric-rejection"
H_TRANSFORM = "h-transform"


def stream_key(seed_base: int, label: str) -> int:
    """Return the 32-bit key of stream ``label`` under ``seed_base``."""
    if seed_base < 0:
        raise ValueError("seed_base must be nonnegative")
    seq = np.random.SeedSequence([int(seed_base), zlib.crc32(label.encode())])
    return int(seq.generate_state(1, np.uint32)[0])


def generator(seed_base: int, label: str) -> np.random.Generator:
    """A numpy Generator on the counter-based Philox bit generator."""
    key = stream_key(seed_base, label)
    return np.random.Generator(np.random.Philox(key=key))
