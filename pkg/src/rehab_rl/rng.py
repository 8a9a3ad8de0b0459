"""Deterministic named random streams derived from one master seed.

Every stochastic component of a run (benefit table, per-episode noise,
embedding training, clustering restarts, ...) draws from its own stream so
that any one component can be re-drawn while all others stay bit-identical.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    """Map a stream label (string or non-negative int) to a 64-bit word."""
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"integer stream labels must be non-negative, got {label}")
        return int(label)
    digest = hashlib.blake2s(str(label).encode("utf8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeedTree:
    """A node in a tree of independent, reproducible random streams.

    Children are addressed by labels; the full label path plus the master
    seed feeds a ``numpy.random.SeedSequence``, so sibling streams are
    statistically independent and stable across runs and platforms.
    """

    __slots__ = ("entropy",)

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError("master seed must be non-negative")
        self.entropy: tuple[int, ...] = (int(master_seed),)

    def child(self, *labels) -> "SeedTree":
        node = SeedTree.__new__(SeedTree)
        node.entropy = self.entropy + tuple(_label_entropy(lab) for lab in labels)
        return node

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.entropy))

    def __repr__(self) -> str:
        return f"SeedTree{self.entropy}"
