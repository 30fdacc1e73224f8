"""
Count-Min and Conservative-Update sketches over counter pools.

Every row is an array of pools; a key hashes to a global counter index in
its row, which splits into a pool and a counter inside that pool. When a
pool cannot grow a counter, the sketch's failure strategy decides what
happens to the pool from then on:

- ignore: the pool is flagged and never read or written again;
- offload: the pool is frozen and further updates for its counters go to a
  small secondary array of 32-bit counters, keyed by (row, counter index);
- merge: the pool is reinterpreted as ceil(k/2) wider counters (two 32-bit
  counters for k = 4), each holding the sum of its constituents, and
  collapses to a single n-bit counter if one of those overflows.

All three keep every row estimate an upper bound of the true count.
"""

import struct
from collections import Counter
from math import ceil
from typing import Dict, List, Literal, Optional, Protocol, Tuple

import mmh3
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import ContractError
from ..utils.logger import logger
from .pool import DEFAULT_CONFIG, PoolArray, PoolConfig, PoolUpdateOutcome

U64_MAX = (1 << 64) - 1
U32_MAX = (1 << 32) - 1

# per-pool side flags
FAILED = 1
MERGED = 2

# merged pools keep their merge level in the (otherwise unused) config slot
MERGE_GROUPS = 1
MERGE_SINGLE = 2

SIDE_BITS_PER_POOL = 2


class FailureStrategy(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["ignore", "offload", "merge"] = "merge"
    secondary_fraction: float = Field(default=0.1, gt=0, le=1)

    @classmethod
    def parse(cls, text: str) -> "FailureStrategy":
        """Parse "ignore", "merge", "offload" or "offload:<fraction>"."""
        name, _, fraction = text.strip().lower().partition(":")
        try:
            if name == "offload" and fraction:
                return cls(kind="offload", secondary_fraction=float(fraction))
            if fraction:
                raise ValueError(f"strategy {name!r} takes no argument")
            return cls(kind=name)
        except ValueError as exc:
            raise ContractError(f"bad failure strategy {text!r}: {exc}") from None

    @property
    def label(self) -> str:
        if self.kind == "offload":
            return f"offload:{self.secondary_fraction:g}"
        return self.kind


class FrequencySketch(Protocol):
    def update(self, key: int, w: int = 1) -> None: ...

    def conservative_update(self, key: int, w: int = 1) -> None: ...

    def query(self, key: int) -> int: ...

    @property
    def memory_bytes(self) -> int: ...


def derive_seeds(seed: int, count: int) -> List[int]:
    """32-bit hash seeds derived deterministically from one sketch seed."""
    rng = np.random.default_rng(seed)
    return [int(x) for x in rng.integers(0, 1 << 32, size=count, dtype=np.uint64)]


def hash_key(key: int, seed: int) -> int:
    return mmh3.hash64(key.to_bytes(8, "little"), seed=seed, signed=False)[0]


class FixedWidthSketch:
    """Rows of saturating fixed-width counters: the baseline the pools are compared to."""

    def __init__(self, memory_bytes: int, rows: int = 4, seed: int = 0, counter_bits: int = 32):
        if counter_bits not in (8, 16, 32, 64):
            raise ContractError(f"unsupported counter width {counter_bits}")
        width = memory_bytes * 8 // (rows * counter_bits)
        if rows < 1 or width < 1:
            raise ContractError(f"{memory_bytes} bytes cannot hold {rows} rows of {counter_bits}-bit counters")
        self.rows = rows
        self.width = width
        self.seed = seed
        self._cap = (1 << counter_bits) - 1
        self.table = np.zeros((rows, width), dtype=getattr(np, f"uint{counter_bits}"))
        self._seeds = derive_seeds(seed, rows)

    @property
    def memory_bytes(self) -> int:
        return int(self.table.nbytes)

    def _cells(self, key: int) -> List[Tuple[int, int]]:
        return [(row, hash_key(key, seed) % self.width) for row, seed in enumerate(self._seeds)]

    def update(self, key: int, w: int = 1) -> None:
        if w < 1:
            raise ContractError(f"sketch weights must be positive, got {w}")
        table = self.table
        for row, col in self._cells(key):
            table[row, col] = min(self._cap, int(table[row, col]) + w)

    def query(self, key: int) -> int:
        table = self.table
        return min(int(table[row, col]) for row, col in self._cells(key))

    def conservative_update(self, key: int, w: int = 1) -> None:
        if w < 1:
            raise ContractError(f"sketch weights must be positive, got {w}")
        table = self.table
        cells = self._cells(key)
        target = min(self._cap, min(int(table[row, col]) for row, col in cells) + w)
        for row, col in cells:
            if table[row, col] < target:
                table[row, col] = target


class PooledSketch:
    """
    Count-Min / Conservative-Update sketch whose counters live in pools.

    memory_bytes covers pools, configuration numbers, the side bitmap (two
    bits per pool: failed and merged) and, under offload, the secondary array
    sized as a fraction of the primary pools. The budget is split into whole
    pools; when they do not divide evenly among the rows, the leading rows get
    one extra pool each. Passing pools_per_row pins the geometry instead, so
    sketches with different strategies can share identical rows.
    """

    def __init__(self, memory_bytes: int, rows: int = 4, config: PoolConfig = DEFAULT_CONFIG,
                 strategy: Optional[FailureStrategy] = None, seed: int = 0,
                 pools_per_row: Optional[int] = None):
        self.config = config
        self.rows = rows
        self.strategy = strategy or FailureStrategy()
        self.seed = seed

        pool_bits = config.n + config.config_bits
        fraction = self.strategy.secondary_fraction if self.strategy.kind == "offload" else 0.0
        per_pool_bits = pool_bits * (1 + fraction) + SIDE_BITS_PER_POOL
        if rows < 1:
            raise ContractError(f"a sketch needs at least one row, got {rows}")
        if pools_per_row is not None:
            if pools_per_row < 1:
                raise ContractError(f"pools_per_row must be positive, got {pools_per_row}")
            row_pools = [pools_per_row] * rows
        else:
            total = int(memory_bytes * 8 // per_pool_bits)
            each, extra = divmod(total, rows)
            if each < 1:
                raise ContractError(f"{memory_bytes} bytes cannot hold {rows} rows of {config} pools")
            row_pools = [each + 1] * extra + [each] * (rows - extra)

        self.row_pools = row_pools
        self.pools = PoolArray(sum(row_pools), config)
        self.state = np.zeros(len(self.pools), dtype=np.uint8)

        seeds = derive_seeds(seed, rows + 1)
        self._secondary_seed = seeds[rows]
        # (hash seed, first pool, counters) per row
        self._row_layout = []
        base = 0
        for row_seed, count in zip(seeds[:rows], row_pools):
            self._row_layout.append((row_seed, base, count * config.k))
            base += count
        self.secondary = None
        if self.strategy.kind == "offload":
            slots = max(1, int(fraction * self.pools.nbytes) // 4)
            self.secondary = np.zeros(slots, dtype=np.uint32)

        groups = ceil(config.k / 2)
        self._merge_groups = groups
        self._merge_width = config.n // groups
        self._n_mask = (1 << config.n) - 1
        self._reported_rows = set()

    @property
    def memory_bytes(self) -> int:
        side = ceil(SIDE_BITS_PER_POOL * len(self.pools) / 8)
        secondary = int(self.secondary.nbytes) if self.secondary is not None else 0
        return self.pools.nbytes + side + secondary

    @property
    def failed_pools(self) -> int:
        return int(np.count_nonzero(self.state & FAILED))

    @property
    def merged_pools(self) -> int:
        return int(np.count_nonzero(self.state & MERGED))

    def _locate(self, key: int) -> List[Tuple[int, int, int, int]]:
        """(row, global pool index, counter in pool, counter index in row) per row."""
        k = self.config.k
        cells = []
        for row, (seed, base, counters) in enumerate(self._row_layout):
            index = hash_key(key, seed) % counters
            cells.append((row, base + index // k, index % k, index))
        return cells

    def _secondary_slot(self, row: int, index: int) -> int:
        data = struct.pack("<IQ", row, index)
        return mmh3.hash64(data, seed=self._secondary_seed, signed=False)[0] % len(self.secondary)

    def _secondary_add(self, row: int, index: int, w: int) -> None:
        slot = self._secondary_slot(row, index)
        self.secondary[slot] = min(U32_MAX, int(self.secondary[slot]) + w)

    def _merged_read(self, pool: int, j: int) -> int:
        memory = int(self.pools.memory[pool])
        if int(self.pools.configs[pool]) == MERGE_SINGLE:
            return memory
        width = self._merge_width
        return (memory >> ((j // 2) * width)) & ((1 << width) - 1)

    def _merged_add(self, pool: int, j: int, w: int) -> None:
        memory = int(self.pools.memory[pool])
        if int(self.pools.configs[pool]) == MERGE_SINGLE:
            self.pools.memory[pool] = min(self._n_mask, memory + w)
            return
        width = self._merge_width
        shift = (j // 2) * width
        field_mask = (1 << width) - 1
        value = ((memory >> shift) & field_mask) + w
        if value <= field_mask:
            self.pools.memory[pool] = (memory & ~(field_mask << shift)) | (value << shift)
            return
        total = sum((memory >> (g * width)) & field_mask for g in range(self._merge_groups)) + w
        self.pools.memory[pool] = min(self._n_mask, total)
        self.pools.configs[pool] = MERGE_SINGLE

    def _row_value(self, row: int, pool: int, j: int, index: int) -> Optional[int]:
        """This row's estimate for the counter, or None when the row must be skipped."""
        state = self.state[pool]
        if not state:
            return self.pools.read(pool, j)
        if state & MERGED:
            return self._merged_read(pool, j)
        if self.strategy.kind == "ignore":
            return None
        return self.pools.read(pool, j) + int(self.secondary[self._secondary_slot(row, index)])

    def _add(self, row: int, pool: int, j: int, index: int, w: int) -> None:
        state = self.state[pool]
        if not state:
            if self.pools.increment(pool, j, w) is not PoolUpdateOutcome.POOL_FAILURE:
                return
            self.apply_failure_strategy(row, pool, (j, index, w))
        elif state & MERGED:
            self._merged_add(pool, j, w)
        elif self.strategy.kind == "offload":
            self._secondary_add(row, index, w)

    def apply_failure_strategy(self, row: int, pool: int, pending: Tuple[int, int, int]) -> None:
        """Recover from a failed increment of `pending` = (counter, counter index, weight)."""
        j, index, w = pending
        if row not in self._reported_rows:
            self._reported_rows.add(row)
            logger.debug("first pool failure in row {} (pool {}, strategy {})", row, pool, self.strategy.label)

        kind = self.strategy.kind
        if kind == "ignore":
            self.state[pool] |= FAILED
            return
        if kind == "offload":
            self.state[pool] |= FAILED
            self._secondary_add(row, index, w)
            return

        values = self.pools.values(pool)
        width = self._merge_width
        sums = [sum(values[g * 2:g * 2 + 2]) for g in range(self._merge_groups)]
        if any(total.bit_length() > width for total in sums):
            self.pools.memory[pool] = min(self._n_mask, sum(values))
            self.pools.configs[pool] = MERGE_SINGLE
        else:
            memory = 0
            for g, total in enumerate(sums):
                memory |= total << (g * width)
            self.pools.memory[pool] = memory
            self.pools.configs[pool] = MERGE_GROUPS
        self.state[pool] = MERGED
        self._merged_add(pool, j, w)

    def update(self, key: int, w: int = 1) -> None:
        if w < 1:
            raise ContractError(f"sketch weights must be positive, got {w}")
        for cell in self._locate(key):
            self._add(*cell, w)

    def query(self, key: int) -> int:
        best = None
        for cell in self._locate(key):
            value = self._row_value(*cell)
            if value is not None and (best is None or value < best):
                best = value
        return U64_MAX if best is None else best

    def conservative_update(self, key: int, w: int = 1) -> None:
        if w < 1:
            raise ContractError(f"sketch weights must be positive, got {w}")
        cells = self._locate(key)
        values = [self._row_value(*cell) for cell in cells]
        live = [v for v in values if v is not None]
        if not live:
            return
        target = min(live) + w
        for cell, value in zip(cells, values):
            if value is not None and value < target:
                self._add(*cell, target - value)

    def width_histogram(self) -> Dict[int, int]:
        """How many counters of healthy pools need each width (canonical sizing)."""
        codec = self.pools.codec
        s, i = self.config.s, self.config.i
        histogram = Counter()
        for pool in np.flatnonzero(self.state == 0).tolist():
            for value in self.pools.values(pool):
                histogram[s + i * codec.canonical_multiple(value)] += 1
        return dict(sorted(histogram.items()))


def make_sketch(variant: str, memory_bytes: int, rows: int = 4, config: PoolConfig = DEFAULT_CONFIG,
                strategy: Optional[FailureStrategy] = None, seed: int = 0) -> FrequencySketch:
    if variant == "pooled":
        return PooledSketch(memory_bytes, rows=rows, config=config, strategy=strategy, seed=seed)
    if variant == "baseline32":
        return FixedWidthSketch(memory_bytes, rows=rows, seed=seed)
    raise ContractError(f"unknown sketch variant {variant!r}")
