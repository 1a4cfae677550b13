"""Seeded random streams.

Backed by numpy's PCG64 bit generator, whose output for a given seed is
fixed across platforms and numpy releases. Named sub-streams are derived
through ``SeedSequence`` with a CRC32 of the name as spawn key, so two
streams with different names never share state and adding a new consumer
does not shift existing ones.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str | int) -> int:
    if isinstance(name, int):
        return int(name)
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Deterministic random stream identified by ``seed`` and a name path."""

    algorithm = "PCG64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))

    def child(self, *names: str | int) -> Rng:
        """Independent stream for ``names``; does not consume from ``self``."""
        return Rng(self.seed, self.path + tuple(_name_key(n) for n in names))

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=None, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
