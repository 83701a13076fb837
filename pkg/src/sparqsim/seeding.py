"""Deterministic derivation of independent RNG streams from one master seed.

Every random decision in a run (per-node gradient noise, per-node compression
randomness, data generation, initial points) pulls from its own numpy
Generator, keyed by the master seed plus a list of labels such as
("grad", 3).  Two properties matter:

* runs with the same master seed are bit-identical, whatever order the
  streams happen to be consumed in, and
* the engine and the straight-line baseline implementations can reconstruct
  the exact same streams from the labels alone.

Derivation is a splitmix64 walk over the label tokens; string labels are
FNV-1a hashed so different purposes never collide with small integers.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_INT_TAG = 0x9E6C63C0D1FF67B3  # keeps derive(s, 1) != derive(s, "1")


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _fnv1a(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def derive(master_seed: int, *labels: int | str) -> int:
    """Derive a 64-bit stream seed from the master seed and a label path."""
    state = _splitmix64(master_seed & _MASK)
    for label in labels:
        if isinstance(label, str):
            token = _fnv1a(label.encode("utf-8"))
        else:
            token = _splitmix64((_INT_TAG ^ int(label)) & _MASK)
        state = _splitmix64(state ^ token)
    return state


def stream(master_seed: int, *labels: int | str) -> np.random.Generator:
    """A numpy Generator for the given label path, independent across paths."""
    return np.random.Generator(np.random.PCG64(derive(master_seed, *labels)))
