"""Deterministic random streams on the Philox counter-based generator.

A stream is identified by the 128-bit key (seed, stream_index). Monte Carlo
paths use PATH_STREAM plus their path index, so each path's increments can
be generated independently and in any order while staying clear of the
low indices free for ad-hoc use. Ensemble sampling uses a reserved stream
index above the path range.
"""

from __future__ import annotations

import numpy as np

PATH_STREAM = 2 ** 62
ENSEMBLE_STREAM = 2 ** 63


def stream(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed % 2 ** 64, index % 2 ** 64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed: int, path: int, K: int, n: int, h: float) -> np.ndarray:
    """Increments Delta w_k ~ N(0, h I_n) for one path, shape (K, n)."""
    return np.sqrt(h) * stream(seed, PATH_STREAM + path).standard_normal((K, n))


def ensemble_stream(seed: int) -> np.random.Generator:
    return stream(seed, ENSEMBLE_STREAM)
