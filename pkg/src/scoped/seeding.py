"""Deterministic RNG streams derived from one global seed.

Every random draw in the package flows through a named sub-stream so that
components can be re-run independently, and so that batch scoring gives
bit-identical results regardless of worker count or scheduling order:
the stream for a sample depends only on (seed, stream name, sample index,
noise level), never on batch composition.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids; changing these changes every derived draw.
STREAM_INIT = 1      # network parameter initialization
STREAM_TRAIN = 2     # minibatch order and training noise
STREAM_CORRUPT = 3   # forward-corruption noise at scoring time
STREAM_PROBE = 4     # Hutchinson probe vectors
STREAM_SPLIT = 5     # held-out ID splits
STREAM_DATA = 6      # synthetic dataset generation
STREAM_PAIR = 7      # per-pair evaluation streams


def noise_level_key(noise_level) -> int:
    """Stable integer key for a discrete step or a continuous sigma."""
    if isinstance(noise_level, (int, np.integer)):
        return int(noise_level)
    # Continuous sigma: hash the exact float64 bit pattern.
    return int(np.float64(noise_level).view(np.uint64))


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for the sub-stream identified by (seed, *path)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, path)]))
