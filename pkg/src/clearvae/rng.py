"""Seeded random streams on a counter-based generator.

All randomness in the package flows through :class:`Rng`, a thin wrapper over
numpy's Philox bit generator.  Philox is counter-based, so a given seed plus
call sequence yields the same outputs on every platform.  Named child streams
(`child`) let independent subsystems (init, batching, reparameterization, ...)
draw from decorrelated streams that are still fully determined by one seed.
"""

from __future__ import annotations

import zlib

import numpy as np

from .autodiff import Tensor


class Rng:
    """Deterministic random stream keyed by a 64-bit seed."""

    def __init__(self, seed: int, _keys: tuple = ()):
        self.seed = int(seed)
        self._keys = tuple(_keys)
        ss = np.random.SeedSequence((self.seed,) + self._keys)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys) -> "Rng":
        """Derive an independent stream; string keys are hashed stably."""
        coded = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k)
                      for k in keys)
        return Rng(self.seed, self._keys + coded)

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def seeded_normal(rng: Rng, shape) -> Tensor:
    """I.i.d. standard normal draws as a constant tensor."""
    return Tensor(rng.normal(shape))
