"""Deterministic, addressable random streams.

Every random draw made during an attack is addressed by the triple
(master_seed, stream_id, counter).  Each draw derives a fresh generator
from that triple, so any single draw can be reproduced in isolation and
streams with distinct ids never share state.  Stream ids are derived from
semantic keys (stage name, class index, candidate index) with a stable
hash, which keeps per-candidate randomness independent of batch layout
and of which other classes run in the same process.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError


def derive_stream_id(*parts) -> int:
    """Map a tuple of strings and integers to a stable 64-bit stream id."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "big")


@dataclass
class RngStream:
    """Counted random stream; one counter tick per draw call."""

    master_seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        if not isinstance(self.master_seed, (int, np.integer)) or self.master_seed < 0:
            raise ContractViolationError("master_seed must be a non-negative integer")
        if self.stream_id < 0 or self.counter < 0:
            raise ContractViolationError("stream_id and counter must be non-negative")

    def _generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed),
            spawn_key=(int(self.stream_id), int(self.counter)),
        )
        self.counter += 1
        return np.random.Generator(np.random.PCG64(seq))

    def normal(self, size=None):
        return self._generator().standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator().uniform(low, high, size)

    def integers(self, low, high, size=None):
        """Uniform integers in [low, high)."""
        return self._generator().integers(low, high, size=size)

    def permutation(self, n):
        return self._generator().permutation(n)

    def choice(self, n, size=None, replace=False, p=None):
        return self._generator().choice(n, size=size, replace=replace, p=p)

    def clone(self) -> "RngStream":
        return RngStream(self.master_seed, self.stream_id, self.counter)

    def substream(self, *parts) -> "RngStream":
        """Fresh stream addressed by this stream's id plus semantic parts."""
        return RngStream(self.master_seed, derive_stream_id(self.stream_id, *parts))
