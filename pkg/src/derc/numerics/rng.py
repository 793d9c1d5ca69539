"""Seeded, counter-based random streams.

Backed by numpy's Philox generator: a stream is fully determined by its seed
and derived-key path, so scheduled-sampling coin flips and corpus generation
replay exactly.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64"


class RngStream:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.algorithm = ALGORITHM
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.draws = 0
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "RngStream":
        """Independent stream derived from this one's seed and ``key``.

        Does not consume draws from the parent.
        """
        return RngStream(self.seed, self.path + tuple(key))

    def _count(self, size) -> None:
        self.draws += 1 if size is None else int(np.prod(size))

    def uniform(self, low=0.0, high=1.0, size=None):
        self._count(size)
        if low == 0.0 and high == 1.0:
            return self._gen.random(size)
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self._count(size)
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high)``."""
        self._count(size)
        return self._gen.integers(low, high, size)

    def choice(self, n: int, p=None, size=None):
        self._count(size)
        return self._gen.choice(n, size=size, p=p)

    def dirichlet(self, alpha, size=None):
        self._count(size)
        return self._gen.dirichlet(alpha, size)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream({self.algorithm}, seed={self.seed}, path={self.path}, draws={self.draws})"
