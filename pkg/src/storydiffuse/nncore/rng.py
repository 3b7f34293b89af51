"""Seeded, splittable random streams on the Philox counter-based generator."""
from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A named random stream.

    ``Rng(seed).child("dataset")`` and ``Rng(seed).child("schedule")`` are
    statistically independent; the same seed and path always reproduce the
    same stream regardless of what other streams consumed.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key(p) for p in self.path))
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self.path + (name,))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def permutation(self, n):
        return self.gen.permutation(n)

    def bernoulli(self, p: float, size=None):
        return self.gen.random(size) < p
