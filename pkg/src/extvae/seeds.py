"""Deterministic random-stream derivation.

Every stochastic routine in the package draws from a Philox (counter-based)
generator keyed by a base seed plus a tuple of labels.  Substreams derived from
the same (seed, labels) are bit-identical across runs and independent across
distinct labels, so per-time / per-sample parallelism cannot change results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    raise TypeError(f"stream label must be int or str, got {type(label).__name__}")


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for (seed, *labels); same inputs, same bits."""
    entropy = (int(seed),) + tuple(_label_int(lab) for lab in labels)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_generator(seed) -> np.random.Generator:
    """Accept either an integer seed or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return substream(seed)
