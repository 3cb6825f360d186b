"""Counter-based random streams.

Every ``(seed, block, step)`` triple maps to its own Philox generator, so a block of
paths draws the same numbers no matter which thread simulates it or in which order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "normals"]


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the key tuple ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def normals(seed: int, shape, *keys: int) -> np.ndarray:
    """Standard normal draws of ``shape`` from the stream keyed by ``(seed, *keys)``."""
    return stream(seed, *keys).standard_normal(shape)
