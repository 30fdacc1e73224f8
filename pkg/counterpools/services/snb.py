"""
Stars-and-bars ranking of size partitions.

A k-partition of n is a list of k non-negative integers summing to n. The
partitions are ranked in lexicographic order, so every partition maps to a
configuration number in [0, snb(n, k)) and back. Encoding and decoding run
iteratively over a precomputed table of partial sums, giving O(k) encode and
O(n + k) decode.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import List, Optional, Sequence

import numpy as np

from ..errors import ContractError, SnBRangeError
from ..utils.logger import logger

U64_MAX = (1 << 64) - 1

ConfigNumber = int


def snb(n: int, k: int) -> int:
    """Number of k-part non-negative integer sequences summing to n."""
    if n < 0 or k < 1:
        raise ContractError(f"snb needs n >= 0 and k >= 1, got n={n}, k={k}")
    count = comb(n + k - 1, k - 1)
    if count > U64_MAX:
        raise SnBRangeError(f"snb({n}, {k}) = {count} does not fit in 64 bits")
    return count


@dataclass(frozen=True)
class SizePartition:
    parts: tuple
    budget: int

    def __post_init__(self):
        parts = tuple(int(x) for x in self.parts)
        object.__setattr__(self, "parts", parts)
        if not parts:
            raise ContractError("a partition needs at least one part")
        if any(x < 0 for x in parts):
            raise ContractError(f"negative part in {list(parts)}")
        if sum(parts) != self.budget:
            raise ContractError(
                f"parts {list(parts)} sum to {sum(parts)}, expected {self.budget}"
            )

    @property
    def k(self) -> int:
        return len(self.parts)

    def __iter__(self):
        return iter(self.parts)

    def __len__(self):
        return len(self.parts)


@dataclass(frozen=True)
class SnBTable:
    """
    Partial sums T[a][b][c] = sum_{j=0}^{c-1} snb(a - j, b).

    b is the number of bins left after the first one is removed, exactly as
    encode/decode consume it. Stored for a in 0..n, b in 0..k (row b = 0 is
    unused and zero), c in 0..a+1, so T[a][b][a+1] = snb(a, b + 1).
    """

    n: int
    k: int
    entries: np.ndarray = field(repr=False, compare=False)
    rows: list = field(repr=False, compare=False)

    def __getitem__(self, a: int):
        return self.rows[a]

    @property
    def shape(self):
        return self.entries.shape

    def __eq__(self, other):
        if not isinstance(other, SnBTable):
            return NotImplemented
        return (self.n, self.k) == (other.n, other.k) and np.array_equal(
            self.entries, other.entries
        )

    @classmethod
    def from_entries(cls, n: int, k: int, entries: np.ndarray) -> "SnBTable":
        entries = np.asarray(entries, dtype=np.uint64).reshape(n + 1, k + 1, n + 2)
        entries.setflags(write=False)
        rows = [
            [[int(v) for v in entries[a, b, : a + 2]] for b in range(k + 1)]
            for a in range(n + 1)
        ]
        return cls(n=n, k=k, entries=entries, rows=rows)


def build_snb_table(n: int, k: int) -> SnBTable:
    if n < 1 or k < 1:
        raise ContractError(f"table dimensions must be positive, got n={n}, k={k}")
    entries = np.zeros((n + 1, k + 1, n + 2), dtype=np.uint64)
    for a in range(n + 1):
        for b in range(1, k + 1):
            running = 0
            for c in range(1, a + 2):
                running += snb(a - (c - 1), b)
                if running > U64_MAX:
                    raise SnBRangeError(f"T[{a}][{b}][{c}] overflows 64 bits")
                entries[a, b, c] = running
    logger.debug("built snb table n={} k={} ({} entries)", n, k, entries.size)
    return SnBTable.from_entries(n, k, entries)


@lru_cache(maxsize=None)
def get_snb_table(n: int, k: int) -> SnBTable:
    """Shared table for (n, k), loaded from or written to the table cache when configured."""
    from . import table_cache

    return table_cache.cached_snb_table(n, k)


def _check_table(table: SnBTable, budget: int, k: int) -> None:
    if budget > table.n or k - 1 > table.k:
        raise ContractError(
            f"table ({table.n}, {table.k}) too small for budget={budget}, k={k}"
        )


def encode_parts(parts: Sequence[int], budget: int, table: Optional[SnBTable] = None) -> int:
    """Rank of `parts` among all len(parts)-partitions of `budget`.

    Unchecked fast path: the caller guarantees the partition is valid.
    """
    rank = 0
    remaining = budget
    bins_left = len(parts) - 1
    if table is not None:
        rows = table.rows
        for x in parts[:-1]:
            rank += rows[remaining][bins_left][x]
            remaining -= x
            bins_left -= 1
        return rank
    for x in parts[:-1]:
        rank += sum(snb(remaining - j, bins_left) for j in range(x))
        remaining -= x
        bins_left -= 1
    return rank


def decode_parts(c: int, budget: int, k: int, table: Optional[SnBTable] = None) -> List[int]:
    parts = []
    remaining = budget
    for bins_left in range(k - 1, 0, -1):
        rho = 0
        if table is not None:
            row = table.rows[remaining][bins_left]
            # row[remaining + 1] = snb(remaining, bins_left + 1) > c, so the scan stops
            while row[rho + 1] <= c:
                rho += 1
            c -= row[rho]
        else:
            step = snb(remaining, bins_left)
            while step <= c:
                c -= step
                rho += 1
                step = snb(remaining - rho, bins_left)
        parts.append(rho)
        remaining -= rho
    parts.append(remaining)
    return parts


def encode(partition: SizePartition, table: Optional[SnBTable] = None) -> ConfigNumber:
    if not isinstance(partition, SizePartition):
        raise ContractError(f"expected a SizePartition, got {type(partition).__name__}")
    if table is not None:
        _check_table(table, partition.budget, partition.k)
    return encode_parts(partition.parts, partition.budget, table)


def decode(c: ConfigNumber, n: int, k: int, table: Optional[SnBTable] = None) -> SizePartition:
    if not 0 <= c < snb(n, k):
        raise ContractError(f"configuration number {c} outside [0, snb({n}, {k}))")
    if table is not None:
        _check_table(table, n, k)
    return SizePartition(tuple(decode_parts(c, n, k, table)), n)
