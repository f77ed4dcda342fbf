"""Seedable random stream.

Backed by numpy's PCG64 bit generator (O'Neill's permuted congruential
generator, 128-bit state, XSL-RR output). Its output sequence for a given
seed is fixed by numpy's stream-compatibility policy and is identical on
every platform.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic generator keyed by a 64-bit seed."""

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) <= MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    def spawn(self, salt: int) -> "Rng":
        """Independent child stream derived from (seed, salt)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(salt)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0, dtype=np.float64):
        out = self._gen.uniform(low, high, size)
        return float(out) if size is None else out.astype(dtype, copy=False)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._gen.standard_normal(size) * std
        return float(out) if size is None else out.astype(dtype, copy=False)

    def trunc_normal(self, size, std: float = 0.02, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
        """Normal(0, std) truncated to [-bound*std, bound*std] by resampling."""
        out = self._gen.standard_normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
