"""Named, independently derived RNG substreams from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("env", "init", "replay", "noise", "explore", "attack", "replica", "replica_replay", "replica_noise", "eval")


def substream(seed: int, purpose: str) -> np.random.Generator:
    """Generator for ``purpose`` under master ``seed``; stable across runs and versions."""
    key = zlib.crc32(purpose.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


class Streams:
    """Lazily created substreams, one per purpose.

    Variants that share a master seed draw identical env/replay sequences
    even when one of them consumes more exploration or noise randomness.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._cache: dict[str, np.random.Generator] = {}

    def __getattr__(self, purpose: str) -> np.random.Generator:
        if purpose.startswith("_"):
            raise AttributeError(purpose)
        if purpose not in self._cache:
            self._cache[purpose] = substream(self.seed, purpose)
        return self._cache[purpose]
