"""XOR-composable random key codes for (type count, attribute bin) feature vectors.

A full key is rebuilt from scratch in O(n_types + n_attrs), but the count part
can be maintained incrementally with two XORs per changed count, which keeps
the per-event keying cost independent of the size of the type universe.
"""

from __future__ import annotations

import random
from typing import Sequence


class ZobristKeys:
    """Seeded 64-bit random codes, one per (type, count bin) and (attribute, value bin).

    ``xor_count`` tallies every XOR performed through this object; tests use it
    to pin the incremental-update cost.
    """

    def __init__(self, n_types: int, max_count_bin: int, attr_n_bins: Sequence[int], seed: int = 0):
        if n_types < 1:
            raise ValueError("need at least one event type")
        if max_count_bin < 0:
            raise ValueError("max_count_bin must be >= 0")
        self.n_types = n_types
        self.max_count_bin = max_count_bin
        self.attr_n_bins = tuple(int(b) for b in attr_n_bins)
        self.seed = seed
        rng = random.Random(seed)
        self.type_codes: list[list[int]] = [
            [rng.getrandbits(64) for _ in range(max_count_bin + 1)] for _ in range(n_types)
        ]
        self.attr_codes: list[list[int]] = [
            [rng.getrandbits(64) for _ in range(nb)] for nb in self.attr_n_bins
        ]
        self.xor_count = 0
        all_codes = [c for row in self.type_codes for c in row] + [
            c for row in self.attr_codes for c in row
        ]
        if len(set(all_codes)) != len(all_codes):
            # With 64-bit codes a duplicate is astronomically unlikely; a
            # different seed restores the distinctness invariant.
            raise ValueError(f"random code collision for seed {seed}; choose another seed")

    def k1_init(self, count_bins: Sequence[int]) -> int:
        """Count-part key: XOR of each type's code at its current count bin."""
        if len(count_bins) != self.n_types:
            raise ValueError("one count bin per type required")
        k1 = 0
        for t, b in enumerate(count_bins):
            k1 ^= self.type_codes[t][b]
            self.xor_count += 1
        return k1

    def k1_update(self, k1: int, type_id: int, old_bin: int, new_bin: int) -> int:
        """Move one type's count bin: exactly two XORs (a no-op when bins match)."""
        codes = self.type_codes[type_id]
        self.xor_count += 2
        return k1 ^ codes[old_bin] ^ codes[new_bin]

    def k2(self, attr_bins: Sequence[int]) -> int:
        """Attribute-part key: XOR of each attribute's code at its value bin."""
        k2 = 0
        for a, b in enumerate(attr_bins):
            k2 ^= self.attr_codes[a][b]
            self.xor_count += 1
        return k2

    def key(self, k1: int, attr_bins: Sequence[int]) -> int:
        """Full key K1 xor K2; at most 1 + len(attr_bins) XORs."""
        self.xor_count += 1
        return k1 ^ self.k2(attr_bins)

    def key_for(self, count_bins: Sequence[int], attr_bins: Sequence[int]) -> int:
        """From-scratch key for a full feature combination (offline path)."""
        return self.key(self.k1_init(count_bins), attr_bins)
