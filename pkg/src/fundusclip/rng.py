"""Deterministic counter-based random number generation.

Every random draw in the pipeline flows through :class:`Rng`, a thin wrapper
around numpy's Philox4x64 bit generator (128-bit key, 256-bit counter).
Philox is counter-based, so a given ``(seed, stream)`` pair produces the same
bit stream on every platform and run.  Normal variates use numpy's ziggurat
sampler; this choice is fixed and part of the reproducibility contract.

``derive(index)`` opens an independent substream per item (corpus pair,
parameter group, epoch) so that work can be parallelised or reordered without
changing results.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of splitmix64; used to fold (seed, stream) into a new seed."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


class Rng:
    """Deterministic random stream identified by a 64-bit seed and stream index.

    The Philox key is ``seed * 2**64 + stream``, so for a fixed seed the map
    ``stream -> key`` is injective: substreams never collide.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = (self.seed << 64) | self.stream
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, index: int) -> "Rng":
        """Independent substream ``index`` of this stream."""
        if self.stream == 0:
            return Rng(self.seed, index)
        # nested derivation: fold the current identity into a fresh seed
        return Rng(_splitmix64(self.seed ^ _splitmix64(self.stream)), index)

    # -- sampling -----------------------------------------------------------

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(len(seq)))]

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"
