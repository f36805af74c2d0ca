"""Seeded counter-based random streams.

Algorithm: philox4x64-10 via numpy.random.Philox (numpy >= 2.2). One root
seed; consumers ask for a named purpose stream ("init", "data-order",
"trajectory", ...). Streams are keyed by (seed, blake2b-64(purpose)), so a
given (seed, purpose, call sequence) is bitwise reproducible and adding a new
consumer never perturbs existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64-10 (numpy.random.Philox)"


def _purpose_key(purpose: str) -> int:
    return int.from_bytes(
        hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest(), "little")


class SeedStreams:
    """Factory of independent named Generator streams under one seed."""

    def __init__(self, seed: int):
        if not (0 <= int(seed) < 2 ** 64):
            raise ValueError("seed must be u64")
        self.seed = int(seed)

    def stream(self, purpose: str) -> np.random.Generator:
        """Fresh generator for `purpose`; same (seed, purpose) => same stream."""
        key = np.array([self.seed, _purpose_key(purpose)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, purpose: str) -> "SeedStreams":
        """Derived root for nested consumers (e.g. per-epoch shuffles)."""
        mixed = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + purpose.encode("utf-8"),
            digest_size=8).digest()
        return SeedStreams(int.from_bytes(mixed, "little"))
