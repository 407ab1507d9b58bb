from __future__ import annotations

import hashlib

import numpy as np


def _derive(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class SeededRng:
    """Deterministic random stream with labelled substreams.

    Two instances built from the same seed produce identical draws, and
    ``child(label)`` gives a stream that depends only on ``(seed, label)``,
    never on how much of the parent has been consumed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, label) -> "SeededRng":
        return SeededRng(_derive(self.seed, str(label)))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self.generator.permutation(x)

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"
