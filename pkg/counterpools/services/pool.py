"""
Counter pools: k variable-width counters sharing one n-bit memory block.

Counter 0 sits in the least-significant bits and counters are packed towards
it; the leftmost counter (index k - 1) owns every bit the others do not use.
The widths are described by a configuration number, the stars-and-bars rank
of the width multiples listed leftmost-first. A per-configuration offset
table turns every read and increment into a constant number of lookups,
shifts and masks; only a resize re-encodes the configuration.
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..errors import ContractError, TableTooLargeError
from ..utils.logger import logger
from .snb import SizePartition, SnBTable, decode_parts, encode_parts, get_snb_table, snb

MAX_OFFSET_TABLE_ENTRIES = 1 << 24


class PoolConfig(BaseModel):
    """The (n, k, s, i) tuple: pool bits, counters, starting width, width step."""

    model_config = ConfigDict(frozen=True)

    n: int = 64
    k: int = 4
    s: int = 0
    i: int = 1

    @model_validator(mode="after")
    def _check_bounds(self):
        if not 1 <= self.n <= 64:
            raise ValueError(f"pool width n must be in 1..64, got {self.n}")
        if self.k < 1 or self.s < 0 or self.i < 1:
            raise ValueError(f"need k >= 1, s >= 0, i >= 1, got k={self.k}, s={self.s}, i={self.i}")
        if self.k * self.s > self.n:
            raise ValueError(f"k*s = {self.k * self.s} exceeds n = {self.n}")
        return self

    @classmethod
    def parse(cls, text: str) -> "PoolConfig":
        """Parse "n,k,s,i"."""
        try:
            n, k, s, i = (int(part) for part in text.replace(" ", "").split(","))
        except ValueError:
            raise ContractError(f"pool config must look like n,k,s,i, got {text!r}") from None
        try:
            return cls(n=n, k=k, s=s, i=i)
        except ValueError as exc:
            raise ContractError(str(exc)) from None

    @property
    def budget(self) -> int:
        """Number of width increments the pool can hand out."""
        return (self.n - self.k * self.s) // self.i

    @property
    def remainder(self) -> int:
        """Bits that never fit a whole increment; the leftmost counter keeps them."""
        return (self.n - self.k * self.s) % self.i

    @property
    def config_count(self) -> int:
        return snb(self.budget, self.k)

    @property
    def config_bits(self) -> int:
        """Narrowest of 8/16/32/64 bits that holds every configuration number."""
        needed = max(1, (self.config_count - 1).bit_length())
        for width in (8, 16, 32, 64):
            if needed <= width:
                return width
        raise ContractError(f"{self.label} has too many configurations")

    @property
    def label(self) -> str:
        return f"{self.n},{self.k},{self.s},{self.i}"

    def __str__(self):
        return f"({self.label})"


DEFAULT_CONFIG = PoolConfig(n=64, k=4, s=0, i=1)

PRESETS = {
    "64,4,0,1": DEFAULT_CONFIG,
    "64,5,8,4": PoolConfig(n=64, k=5, s=8, i=4),
    "64,6,7,4": PoolConfig(n=64, k=6, s=7, i=4),
    "64,4,12,2": PoolConfig(n=64, k=4, s=12, i=2),
}


class PoolUpdateOutcome(str, Enum):
    IN_PLACE = "in_place"
    RESIZED = "resized"
    POOL_FAILURE = "pool_failure"


def _config_dtype(config: PoolConfig):
    return {8: np.uint8, 16: np.uint16, 32: np.uint32, 64: np.uint64}[config.config_bits]


@dataclass(frozen=True)
class OffsetTable:
    """
    Bit offsets of every counter for every configuration number.

    offsets[c] has k + 1 entries: offset_0 = 0, ..., offset_{k-1}, and the
    sentinel offset_k = n, so width_j = offsets[c][j + 1] - offsets[c][j].
    multiples[c] is the decoded leftmost-first partition of the budget.
    """

    config: PoolConfig
    offsets: list = field(repr=False, compare=False)
    multiples: list = field(repr=False, compare=False)

    def __len__(self):
        return len(self.offsets)

    @property
    def offset_bits(self) -> int:
        return self.config.n.bit_length()

    @property
    def word_bits(self) -> int:
        return 32 if (self.config.k - 1) * self.offset_bits <= 32 else 64

    def widths(self, c: int) -> Tuple[int, ...]:
        row = self.offsets[c]
        return tuple(row[j + 1] - row[j] for j in range(self.config.k))

    def packed(self) -> np.ndarray:
        """One word per configuration: offsets 1..k-1 at offset_bits each, low first."""
        bits = self.offset_bits
        words = []
        for row in self.offsets:
            word = 0
            for position, offset in enumerate(row[1:-1]):
                word |= offset << (position * bits)
            words.append(word)
        dtype = np.uint32 if self.word_bits == 32 else np.uint64
        return np.array(words, dtype=dtype)

    @classmethod
    def from_packed(cls, config: PoolConfig, words: np.ndarray) -> "OffsetTable":
        bits = config.n.bit_length()
        mask = (1 << bits) - 1
        k = config.k
        offsets = []
        for word in words.tolist():
            inner = [(word >> (position * bits)) & mask for position in range(k - 1)]
            offsets.append(tuple([0] + inner + [config.n]))
        multiples = [_multiples_from_offsets(config, row) for row in offsets]
        return cls(config=config, offsets=offsets, multiples=multiples)

    def __eq__(self, other):
        if not isinstance(other, OffsetTable):
            return NotImplemented
        return self.config == other.config and self.offsets == other.offsets


def _multiples_from_offsets(config: PoolConfig, row: Sequence[int]) -> Tuple[int, ...]:
    k, s, i = config.k, config.s, config.i
    inner = [(row[j + 1] - row[j] - s) // i for j in range(k - 1)]
    leftmost = config.budget - sum(inner)
    return tuple([leftmost] + inner[::-1])


def widths_from_multiples(config: PoolConfig, multiples: Sequence[int]) -> List[int]:
    """Counter widths (counter 0 first) for leftmost-first multiples."""
    k, s, i = config.k, config.s, config.i
    widths = [s + i * m for m in reversed(multiples)]
    widths[k - 1] += config.remainder
    return widths


def build_offset_table(config: PoolConfig, table: Optional[SnBTable] = None) -> OffsetTable:
    count = config.config_count
    if count > MAX_OFFSET_TABLE_ENTRIES:
        raise TableTooLargeError(
            f"{config} has {count} configurations, above the {MAX_OFFSET_TABLE_ENTRIES} limit"
        )
    budget, k = config.budget, config.k
    if table is None:
        table = get_snb_table(max(budget, 1), k)
    offsets = []
    multiples = []
    for c in range(count):
        parts = tuple(decode_parts(c, budget, k, table))
        running = 0
        row = [0]
        for width in widths_from_multiples(config, parts)[:-1]:
            running += width
            row.append(running)
        row.append(config.n)
        offsets.append(tuple(row))
        multiples.append(parts)
    logger.debug("built offset table for {} ({} entries)", config, count)
    return OffsetTable(config=config, offsets=offsets, multiples=multiples)


@lru_cache(maxsize=None)
def get_offset_table(config: PoolConfig) -> OffsetTable:
    from . import table_cache

    return table_cache.cached_offset_table(config)


@lru_cache(maxsize=None)
def get_codec(config: PoolConfig) -> "PoolCodec":
    return PoolCodec(config)


class PoolCodec:
    """Table-driven operations on a raw (memory, config number) pair.

    Shared and immutable; pools, pool arrays and cuckoo buckets all go
    through one codec per PoolConfig.
    """

    def __init__(self, config: PoolConfig, offset_table: Optional[OffsetTable] = None,
                 snb_table: Optional[SnBTable] = None):
        self.config = config
        self.snb_table = snb_table or get_snb_table(max(config.budget, 1), config.k)
        self.offset_table = offset_table or get_offset_table(config)
        self._offsets = self.offset_table.offsets
        self._multiples = self.offset_table.multiples
        self._mask = (1 << config.n) - 1
        self.fresh_config = config.config_count - 1

    def _check_index(self, j: int) -> None:
        if not 0 <= j < self.config.k:
            raise ContractError(f"counter index {j} outside 0..{self.config.k - 1}")

    def canonical_multiple(self, value: int) -> int:
        """Smallest m with value < 2 ** (s + m * i)."""
        excess = value.bit_length() - self.config.s
        if excess <= 0:
            return 0
        return -(-excess // self.config.i)

    def leftmost_multiple(self, value: int) -> int:
        """Smallest leftmost multiple that still holds `value` (it also keeps the remainder bits)."""
        excess = value.bit_length() - self.config.s - self.config.remainder
        if excess <= 0:
            return 0
        return -(-excess // self.config.i)

    def read(self, memory: int, c: int, j: int) -> int:
        self._check_index(j)
        row = self._offsets[c]
        offset = row[j]
        return (memory >> offset) & ((1 << (row[j + 1] - offset)) - 1)

    def values(self, memory: int, c: int) -> List[int]:
        row = self._offsets[c]
        return [(memory >> row[j]) & ((1 << (row[j + 1] - row[j])) - 1) for j in range(self.config.k)]

    def counter_widths(self, c: int) -> Tuple[int, ...]:
        return self.offset_table.widths(c)

    def free_bits(self, memory: int, c: int) -> int:
        """Bits the leftmost counter can give away while still holding its value."""
        k = self.config.k
        lc_offset = self._offsets[c][k - 1]
        spare = self._multiples[c][0] - self.leftmost_multiple(memory >> lc_offset)
        return spare * self.config.i

    def increment(self, memory: int, c: int, j: int, w: int) -> Tuple[PoolUpdateOutcome, int, int]:
        """Add `w` to counter j; returns (outcome, memory, config). Failure leaves both unchanged."""
        self._check_index(j)
        k = self.config.k
        row = self._offsets[c]
        offset = row[j]
        next_offset = row[j + 1]
        size = next_offset - offset
        field_mask = (1 << size) - 1
        v = (memory >> offset) & field_mask
        target = v + w
        if target < 0:
            raise ContractError(f"counter {j} would go negative ({v} + {w})")

        if j == k - 1:
            if target.bit_length() > size:
                return PoolUpdateOutcome.POOL_FAILURE, memory, c
            memory = (memory & ~(field_mask << offset)) | (target << offset)
            return PoolUpdateOutcome.IN_PLACE, memory & self._mask, c

        multiples = self._multiples[c]
        position = k - 1 - j
        new_multiple = self.canonical_multiple(target)
        if new_multiple == multiples[position]:
            memory = (memory & ~(field_mask << offset)) | (target << offset)
            return PoolUpdateOutcome.IN_PLACE, memory, c

        step = new_multiple - multiples[position]
        new_bits = step * self.config.i
        lc_offset = row[k - 1]
        spare = multiples[0] - self.leftmost_multiple(memory >> lc_offset)
        if step > spare:
            return PoolUpdateOutcome.POOL_FAILURE, memory, c

        low = memory & ((1 << offset) - 1)
        new = target << offset
        high = (memory >> next_offset) << (next_offset + new_bits)
        memory = (high | new | low) & self._mask

        parts = list(multiples)
        parts[position] = new_multiple
        parts[0] -= step
        c = encode_parts(parts, self.config.budget, self.snb_table)
        return PoolUpdateOutcome.RESIZED, memory, c


class Pool:
    """A single pool: one n-bit block plus its configuration number."""

    __slots__ = ("codec", "memory", "config_number")

    def __init__(self, config: PoolConfig = DEFAULT_CONFIG, memory: int = 0,
                 config_number: Optional[int] = None, codec: Optional[PoolCodec] = None):
        self.codec = codec or get_codec(config)
        self.memory = memory
        self.config_number = self.codec.fresh_config if config_number is None else config_number
        if not 0 <= self.config_number < len(self.codec.offset_table):
            raise ContractError(f"configuration number {self.config_number} out of range")

    @property
    def config(self) -> PoolConfig:
        return self.codec.config

    def read(self, j: int) -> int:
        return self.codec.read(self.memory, self.config_number, j)

    def values(self) -> List[int]:
        return self.codec.values(self.memory, self.config_number)

    def increment(self, j: int, w: int = 1) -> PoolUpdateOutcome:
        outcome, self.memory, self.config_number = self.codec.increment(
            self.memory, self.config_number, j, w
        )
        return outcome

    def counter_widths(self) -> SizePartition:
        """Widths of counters 0..k-1 as a partition of n."""
        return SizePartition(self.codec.counter_widths(self.config_number), self.config.n)

    def free_bits(self) -> int:
        return self.codec.free_bits(self.memory, self.config_number)

    def __repr__(self):
        return f"Pool({self.config}, memory={self.memory:#x}, config={self.config_number})"


class PoolArray:
    """
    `count` pools stored as two parallel arrays: the n-bit blocks (uint64)
    and the configuration numbers (uint8/16/32 depending on the preset).
    """

    def __init__(self, count: int, config: PoolConfig = DEFAULT_CONFIG):
        self.codec = get_codec(config)
        self.config = config
        self.memory = np.zeros(count, dtype=np.uint64)
        self.configs = np.full(count, self.codec.fresh_config, dtype=_config_dtype(config))

    def __len__(self):
        return len(self.memory)

    @property
    def nbytes(self) -> int:
        """Storage cost: n bits of memory plus the configuration width, per pool."""
        return len(self) * (self.config.n + self.config.config_bits) // 8

    def read(self, index: int, j: int) -> int:
        return self.codec.read(int(self.memory[index]), int(self.configs[index]), j)

    def values(self, index: int) -> List[int]:
        return self.codec.values(int(self.memory[index]), int(self.configs[index]))

    def increment(self, index: int, j: int, w: int) -> PoolUpdateOutcome:
        outcome, memory, c = self.codec.increment(
            int(self.memory[index]), int(self.configs[index]), j, w
        )
        if outcome is PoolUpdateOutcome.RESIZED:
            self.memory[index] = memory
            self.configs[index] = c
        elif outcome is PoolUpdateOutcome.IN_PLACE:
            self.memory[index] = memory
        return outcome

    def counter_widths(self, index: int) -> SizePartition:
        return SizePartition(self.codec.counter_widths(int(self.configs[index])), self.config.n)

    def free_bits(self, index: int) -> int:
        return self.codec.free_bits(int(self.memory[index]), int(self.configs[index]))

    def reset(self, index: int) -> None:
        self.memory[index] = 0
        self.configs[index] = self.codec.fresh_config


def separate_slack_config_count(config: PoolConfig) -> int:
    """Configurations needed when unallocated increments sit in their own bin."""
    return snb(config.budget, config.k + 1)


def separate_slack_encode(multiples: Sequence[int], config: PoolConfig) -> int:
    """
    Rank canonical multiples (counter 0 first, leftmost counter at its own
    canonical need) plus an explicit slack bin. Raises when the demand
    exceeds the budget, which is exactly when that layout fails.
    """
    if len(multiples) != config.k:
        raise ContractError(f"expected {config.k} multiples, got {len(multiples)}")
    slack = config.budget - sum(multiples)
    if slack < 0 or any(m < 0 for m in multiples):
        raise ContractError(f"multiples {list(multiples)} do not fit budget {config.budget}")
    return encode_parts([slack] + list(reversed(multiples)), config.budget)
