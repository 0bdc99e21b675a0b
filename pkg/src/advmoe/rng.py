"""Deterministic seeded RNG streams.

Every source of randomness in the package is a named child stream of one
master seed, so runs are bit-reproducible and independent components
(init, shuffling, attacks, synthetic data) never share state.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def _fnv1a(label: str) -> int:
    # FNV-1a over the UTF-8 bytes; stable across runs and platforms.
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master_seed: int, stream_id: str) -> int:
    """64-bit child seed, a pure function of (master_seed, stream_id)."""
    return _splitmix64((master_seed & _MASK64) ^ _fnv1a(stream_id))


class RngStream:
    """A named random stream derived from a master seed.

    Identical (master_seed, stream_id) pairs always yield identical
    sequences. Sub-streams are derived by extending the id path, e.g.
    ``RngStream(7, "shuffle").child("epoch3")``.
    """

    def __init__(self, master_seed: int, stream_id: str):
        self.master_seed = int(master_seed)
        self.stream_id = stream_id

    @property
    def seed(self) -> int:
        return derive_seed(self.master_seed, self.stream_id)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.PCG64(self.seed))

    def child(self, label) -> "RngStream":
        return RngStream(self.master_seed, f"{self.stream_id}/{label}")

    def __repr__(self):
        return f"RngStream({self.master_seed}, {self.stream_id!r})"
