"""Deterministic pseudo-randomness for dataset shuffling and the mock backend.

Dataset splits must be byte-identical across platforms and library versions,
so shuffling uses a self-contained splitmix64 generator instead of a library
RNG whose stream may change between releases.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64 per Steele, Lea & Flood; 64-bit state, 64-bit output."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) without modulo bias (rejection sampling)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_without_replacement(self, items: list, k: int) -> list:
        """k distinct elements, order-stable with respect to the input."""
        if k > len(items):
            raise ValueError("sample larger than population")
        idx = list(range(len(items)))
        self.shuffle(idx)
        keep = sorted(idx[:k])
        return [items[i] for i in keep]


def hash_float(*parts: object) -> float:
    """Deterministic float in [0, 1) from arbitrary key parts (sha256-based)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / float(1 << 64)


def hash_hex(*parts: object, length: int = 8) -> str:
    """Deterministic short hex token from arbitrary key parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).hexdigest()
    return digest[:length]
