"""Reproducible random-number streams.

All randomness in the package flows through ``numpy.random.Generator``
instances backed by the counter-based Philox bit generator.  Replicate
streams are derived as ``seed XOR replicate_index`` so that a replicate's
stream depends only on (seed, index), never on execution order, and
distinct replicates use distinct Philox keys.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_rng(seed: int, index: int = 0) -> np.random.Generator:
    """Generator for replicate ``index`` of the experiment keyed by ``seed``."""
    key = (int(seed) ^ int(index)) & _MASK64
    return np.random.Generator(np.random.Philox(key=key))


def substream(rng: np.random.Generator, jumps: int) -> np.random.Generator:
    """Independent stream obtained by jumping the parent's bit generator.

    Used for within-replicate parallelism (tempering levels, chain pairs);
    the parent stream is left untouched.
    """
    return np.random.Generator(rng.bit_generator.jumped(jumps + 1))
