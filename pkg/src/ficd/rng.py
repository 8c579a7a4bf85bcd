"""Seeded generators.

Every stream is a numpy ``Philox`` (4x64, 10 rounds) counter-based generator
keyed directly by ``(seed, stream)``, so any component can be reproduced in
isolation from its key without replaying earlier draws.
"""
import numpy as np

_MASK = (1 << 64) - 1


def philox(seed, stream=0):
    key = np.array([int(seed) & _MASK, int(stream) & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
