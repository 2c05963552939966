"""Seeded random streams.

Every stochastic draw in the package (timesteps, Gaussian noise, dataset
starts, frozen feature maps) goes through :class:`SeededRng`.  The generator
is numpy's PCG64 seeded through ``SeedSequence``; both algorithms are fixed
and documented by numpy, so a seed names one draw sequence on every platform.

Derived streams use the two-word entropy ``[seed, index]`` so that stream
``(s, i)`` never aliases the root stream ``s``.
"""

from __future__ import annotations

import numpy as np


class SeededRng:
    """Deterministic random stream backed by PCG64."""

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        entropy = [self.seed, *self.stream] if self.stream else self.seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, index: int) -> "SeededRng":
        """Independent stream for worker / episode ``index``."""
        return SeededRng(self.seed, self.stream + (index,))

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    # state round-trip for checkpoints
    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": list(self.stream),
                "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], tuple(state["stream"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"
