"""Counter-based random streams.

Every draw is addressed by ``(master_seed, replica, step)``, so a replica's
noise does not depend on which worker runs it or in what order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Stream"]


def _zigzag(k: int) -> int:
    # spawn keys must be non-negative; pullback runs use negative step indices
    return 2 * k if k >= 0 else -2 * k - 1


@dataclass(frozen=True)
class Stream:
    """Family of independent Philox generators keyed by replica and step."""

    master_seed: int
    tag: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    def at(self, replica: int, step: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            int(self.master_seed), spawn_key=(self.tag, int(replica), _zigzag(int(step)))
        )
        return np.random.Generator(np.random.Philox(seq))

    def child(self, tag: int) -> "Stream":
        """A disjoint stream family, e.g. for auxiliary draws."""
        return Stream(self.master_seed, tag=int(tag))
