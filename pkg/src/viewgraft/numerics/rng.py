"""Seeded randomness with derivable substreams.

Every stream is a PCG64 generator keyed by a 64-bit seed. ``child(tag)``
derives an independent stream by hashing the parent's seed path with the
tag, so pipeline stages can draw from disjoint streams that depend only on
the experiment seed and the stage name. Same seed, same platform build of
numpy -> byte-identical draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .matrix import Matrix


def _derive(path: str) -> int:
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    def __init__(self, seed: int, _path: str | None = None):
        self.seed = int(seed)
        self._path = _path if _path is not None else f"root:{self.seed}"
        self._gen = np.random.Generator(np.random.PCG64(_derive(self._path)))

    def child(self, tag: str) -> "Rng":
        """Independent stream derived from this one; deterministic in (seed, tag)."""
        return Rng(self.seed, _path=f"{self._path}/{tag}")

    def normal(self, rows: int, cols: int, std: float = 1.0) -> Matrix:
        arr = (self._gen.standard_normal((rows, cols)) * std).astype(np.float32)
        arr.setflags(write=False)
        return arr

    def uniform(self, rows: int, cols: int, low: float = 0.0, high: float = 1.0) -> Matrix:
        arr = self._gen.uniform(low, high, (rows, cols)).astype(np.float32)
        arr.setflags(write=False)
        return arr

    def integer(self, low: int, high: int) -> int:
        """One integer in [low, high)."""
        return int(self._gen.integers(low, high))

    def __repr__(self):
        return f"Rng({self._path!r})"
