"""Seedable sample source threaded through every random draw.

Backed by numpy's PCG64 bit generator, so a given seed yields the same
stream for a fixed numpy version.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Rng:
    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def reseed(self, seed: int | None = None) -> None:
        if seed is not None:
            self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError(f"std must be nonnegative, got {std}")
        return self._gen.normal(mean, std, size=shape) if std > 0 else np.full(shape, float(mean))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def spawn(self) -> Rng:
        """An independent child stream, deterministic given this stream's state."""
        return Rng(int(self._gen.integers(0, 2**63 - 1)))


def sample_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0,
                  requires_grad: bool = False) -> Tensor:
    """A leaf tensor of i.i.d. N(mean, std^2) draws."""
    return Tensor(rng.normal(tuple(shape), mean, std), requires_grad=requires_grad)
