"""Named, counter-based random streams.

Every stream is a Philox generator keyed by ``(master_seed, stream name,
trial index)``. Two different names never share state, which is what lets
the learning-stage query points be provably independent of contexts and
rewards.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAMS = (
    "learn-actions",
    "learn-contexts",
    "noise",
    "approx-set",
    "mechanism",
    "eval",
    "eval-mechanism",
    "env",
    "gamma",
    "final-context",
    "audit",
)


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master_seed: int, name: str, trial: int = 0) -> np.random.Generator:
    """Return the generator for ``name`` in trial ``trial``."""
    if master_seed < 0 or trial < 0:
        raise ValueError("seeds and trial indices must be non-negative")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(_name_key(name), int(trial)))
    return np.random.Generator(np.random.Philox(seq))


class Streams:
    """Convenience bundle of streams for one (master_seed, trial) pair."""

    def __init__(self, master_seed: int, trial: int = 0):
        self.master_seed = int(master_seed)
        self.trial = int(trial)

    def __getitem__(self, name: str) -> np.random.Generator:
        return stream(self.master_seed, name, self.trial)

    def child_seed(self, name: str) -> int:
        """A plain integer seed derived from the named stream."""
        return int(self[name].integers(0, 2**63 - 1))
