"""
Exact histograms in a cuckoo hash table whose buckets are counter pools.

Keys are u-bit integers. A fixed invertible permutation P scrambles the key;
the top b bits of P(key) pick the primary bucket and the remaining u - b bits
are the stored fingerprint. The alternate bucket is primary XOR H(fp), and a
one-bit flag per slot says which of the two the entry sits in, so every key
is exactly recoverable from (bucket, fingerprint, flag).

Each bucket's k slots share one pool. When a pool cannot grant bits for a
counter to grow, or has no free slot for a new key, entries are moved to
their other bucket (cuckoo eviction) rather than losing precision.
"""

import csv
import io
import random
from math import ceil
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, TextIO, Tuple, Union

import mmh3
import numpy as np

from ..errors import ContractError, TableFullError
from ..utils.logger import logger
from .pool import DEFAULT_CONFIG, PoolArray, PoolConfig, PoolUpdateOutcome
from .sketch import derive_seeds

MAX_KICKS = 500
DEFAULT_KEY_BITS = 32
DEFAULT_BUCKET_EXP = 17

_FAILED = PoolUpdateOutcome.POOL_FAILURE


class KeyPermutation:
    """Multiply / xorshift bijection on `bits`-bit integers."""

    def __init__(self, bits: int, seed: int = 0):
        if not 1 <= bits <= 64:
            raise ContractError(f"key width must be in 1..64, got {bits}")
        self.bits = bits
        self.mask = (1 << bits) - 1
        self._shift = max(1, bits // 2)
        self._rounds = ceil(bits / self._shift)
        rng = np.random.default_rng(seed)
        multipliers = rng.integers(0, 1 << 63, size=2, dtype=np.uint64)
        self._multipliers = [(int(m) & self.mask) | 1 for m in multipliers]
        self._inverses = [pow(m, -1, 1 << bits) for m in self._multipliers]

    def forward(self, x: int) -> int:
        for m in self._multipliers:
            x = (x * m) & self.mask
            x ^= x >> self._shift
        return x

    def inverse(self, y: int) -> int:
        for m_inv in reversed(self._inverses):
            x = y
            for _ in range(self._rounds):
                x = y ^ (x >> self._shift)
            y = (x * m_inv) & self.mask
        return y


class Entry(NamedTuple):
    fingerprint: int
    flag: int
    count: int


class SlotEntry(NamedTuple):
    bucket: int
    slot: int
    key: int
    count: int


# (primary bucket, fingerprint, count) of an entry that is being moved
_InFlight = Tuple[int, int, int]


def entry_bytes(layout: str, key_bits: int = DEFAULT_KEY_BITS, bucket_exp: int = DEFAULT_BUCKET_EXP,
                config: PoolConfig = DEFAULT_CONFIG) -> float:
    """
    Bytes per table entry for the three exact-counting layouts:
    plain (full key + 32-bit value), fingerprint32 (fingerprint and flag +
    32-bit value) and pooled (fingerprint and flag + a 1/k share of a pool).
    """
    fingerprint_bits = key_bits - bucket_exp + 1
    if layout == "plain":
        return (key_bits + 32) / 8
    if layout == "fingerprint32":
        return (fingerprint_bits + 32) / 8
    if layout == "pooled":
        return (fingerprint_bits + (config.n + config.config_bits) / config.k) / 8
    raise ContractError(f"unknown table layout {layout!r}")


def load_factor_at_budget(bytes_per_flow: float, bytes_per_entry: float) -> float:
    """Load factor a layout runs at when given `bytes_per_flow` of memory per tracked key."""
    return bytes_per_entry / bytes_per_flow


class PooledCuckooTable:
    def __init__(self, bucket_exp: int = DEFAULT_BUCKET_EXP, key_bits: int = DEFAULT_KEY_BITS,
                 config: PoolConfig = DEFAULT_CONFIG, seed: int = 0, max_kicks: int = MAX_KICKS):
        if not 0 <= bucket_exp < key_bits <= 64:
            raise ContractError(f"need 0 <= bucket_exp < key_bits <= 64, got b={bucket_exp}, u={key_bits}")
        if key_bits - bucket_exp + 1 > 64:
            raise ContractError("fingerprint plus flag must fit in 64 bits")
        if config.k > 32:
            raise ContractError(f"{config} has too many slots per bucket")
        self.bucket_exp = bucket_exp
        self.key_bits = key_bits
        self.config = config
        self.seed = seed
        self.max_kicks = max_kicks

        self.buckets = 1 << bucket_exp
        self.slots = config.k
        self.fingerprint_bits = key_bits - bucket_exp
        self._fp_mask = (1 << self.fingerprint_bits) - 1

        self.pools = PoolArray(self.buckets, config)
        # fingerprint << 1 | flag
        self.tags = np.zeros((self.buckets, self.slots), dtype=np.uint64)
        self.occupancy = np.zeros(self.buckets, dtype=np.uint32)
        self.size = 0

        self.permutation = KeyPermutation(key_bits, seed)
        self._displacement_seed = derive_seeds(seed, 1)[0]
        self._rng = random.Random(seed)

    def __len__(self):
        return self.size

    @property
    def capacity(self) -> int:
        return self.buckets * self.slots

    def load_factor(self) -> float:
        return self.size / self.capacity

    @property
    def bytes_per_entry(self) -> float:
        return entry_bytes("pooled", self.key_bits, self.bucket_exp, self.config)

    @property
    def memory_bytes(self) -> int:
        tag_bits = self.capacity * (self.fingerprint_bits + 1)
        occupancy_bits = self.capacity
        return self.pools.nbytes + ceil((tag_bits + occupancy_bits) / 8)

    def _displacement(self, fingerprint: int) -> int:
        if self.buckets == 1:
            return 0
        h = mmh3.hash64(fingerprint.to_bytes(8, "little"), seed=self._displacement_seed, signed=False)[0]
        return h % (self.buckets - 1) + 1

    def alternate(self, bucket: int, fingerprint: int) -> int:
        return bucket ^ self._displacement(fingerprint)

    def _split(self, key: int) -> Tuple[int, int]:
        if not 0 <= key <= self.permutation.mask:
            raise ContractError(f"key {key} does not fit in {self.key_bits} bits")
        scrambled = self.permutation.forward(key)
        return scrambled >> self.fingerprint_bits, scrambled & self._fp_mask

    def _key_of(self, primary: int, fingerprint: int) -> int:
        return self.permutation.inverse((primary << self.fingerprint_bits) | fingerprint)

    def _other(self, entry: _InFlight, bucket: int) -> int:
        primary, fingerprint, _ = entry
        return self.alternate(primary, fingerprint) if bucket == primary else primary

    def _find(self, bucket: int, fingerprint: int, flag: int) -> Optional[int]:
        occupied = int(self.occupancy[bucket])
        if not occupied:
            return None
        tag = (fingerprint << 1) | flag
        row = self.tags[bucket]
        for slot in range(self.slots):
            if occupied >> slot & 1 and int(row[slot]) == tag:
                return slot
        return None

    def _locate(self, key: int) -> Tuple[int, int, Optional[int], Optional[int]]:
        primary, fingerprint = self._split(key)
        slot = self._find(primary, fingerprint, 0)
        if slot is not None:
            return primary, fingerprint, primary, slot
        alternate = self.alternate(primary, fingerprint)
        if alternate != primary:
            slot = self._find(alternate, fingerprint, 1)
            if slot is not None:
                return primary, fingerprint, alternate, slot
        return primary, fingerprint, None, None

    def _place(self, bucket: int, entry: _InFlight, slot: Optional[int] = None) -> Optional[int]:
        """Store `entry` in a free slot of `bucket` if the pool grants its bits."""
        primary, fingerprint, count = entry
        occupied = int(self.occupancy[bucket])
        if slot is None:
            free = [s for s in range(self.slots) if not occupied >> s & 1]
            if not free:
                return None
            slot = free[0]
        if self.pools.increment(bucket, slot, count) is _FAILED:
            return None
        self.tags[bucket, slot] = (fingerprint << 1) | int(bucket != primary)
        self.occupancy[bucket] = occupied | (1 << slot)
        self.size += 1
        return slot

    def _take(self, bucket: int, slot: int) -> _InFlight:
        """Remove an entry, returning its bits to the pool."""
        count = self.pools.read(bucket, slot)
        self.pools.increment(bucket, slot, -count)
        tag = int(self.tags[bucket, slot])
        fingerprint, flag = tag >> 1, tag & 1
        primary = self.alternate(bucket, fingerprint) if flag else bucket
        self.tags[bucket, slot] = 0
        self.occupancy[bucket] = int(self.occupancy[bucket]) & ~(1 << slot)
        self.size -= 1
        return primary, fingerprint, count

    def _relocate(self, entry: _InFlight, bucket: int) -> Optional[_InFlight]:
        """Eviction chain starting at `bucket`; returns the entry left homeless, if any."""
        protected = None
        for _ in range(self.max_kicks):
            if self._place(bucket, entry) is not None:
                return None
            occupied = int(self.occupancy[bucket])
            candidates = [
                s for s in range(self.slots)
                if occupied >> s & 1 and (bucket, s) != protected
            ]
            if not candidates:
                bucket = self._other(entry, bucket)
                continue
            victim_slot = self._rng.choice(candidates)
            victim = self._take(bucket, victim_slot)
            landed = self._place(bucket, entry)
            if landed is None:
                # not enough bits even with the victim gone: undo and try the entry's other bucket
                self._place(bucket, victim, slot=victim_slot)
                bucket = self._other(entry, bucket)
                continue
            protected = (bucket, landed)
            entry = victim
            bucket = self._other(victim, bucket)
        return entry

    def _rehome(self, homeless: List[_InFlight], bucket: int) -> None:
        unplaced = []
        for entry in homeless:
            leftover = self._relocate(entry, self._other(entry, bucket))
            if leftover is not None:
                primary, fingerprint, count = leftover
                unplaced.append((self._key_of(primary, fingerprint), count))
        if unplaced:
            logger.warning("cuckoo table full at load {:.3f}: {} entries unplaced", self.load_factor(), len(unplaced))
            raise TableFullError(unplaced)

    def _grow(self, bucket: int, slot: int, w: int) -> None:
        """Add `w` to an existing entry, migrating bucket-mates until the pool has the bits."""
        if self.pools.increment(bucket, slot, w) is not _FAILED:
            return
        homeless = []
        while True:
            occupied = int(self.occupancy[bucket])
            others = [s for s in range(self.slots) if occupied >> s & 1 and s != slot]
            if not others:
                primary, fingerprint, count = self._take(bucket, slot)
                homeless.append((primary, fingerprint, count + w))
                break
            homeless.append(self._take(bucket, self._rng.choice(others)))
            if self.pools.increment(bucket, slot, w) is not _FAILED:
                break
        self._rehome(homeless, bucket)

    def increment(self, key: int, w: int = 1) -> None:
        """Count `w` more occurrences of `key`. Raises TableFullError if an eviction chain runs out."""
        if w < 1:
            raise ContractError(f"histogram weights must be positive, got {w}")
        primary, fingerprint, bucket, slot = self._locate(key)
        if bucket is not None:
            self._grow(bucket, slot, w)
            return
        entry = (primary, fingerprint, w)
        alternate = self.alternate(primary, fingerprint)
        for candidate in (primary, alternate):
            if self._place(candidate, entry) is not None:
                return
        leftover = self._relocate(entry, self._rng.choice((primary, alternate)))
        if leftover is not None:
            primary, fingerprint, count = leftover
            logger.warning("cuckoo table full at load {:.3f}", self.load_factor())
            raise TableFullError([(self._key_of(primary, fingerprint), count)])

    def query(self, key: int) -> int:
        _, _, bucket, slot = self._locate(key)
        if bucket is None:
            return 0
        return self.pools.read(bucket, slot)

    def entry(self, bucket: int, slot: int) -> Optional[Entry]:
        if not int(self.occupancy[bucket]) >> slot & 1:
            return None
        tag = int(self.tags[bucket, slot])
        return Entry(fingerprint=tag >> 1, flag=tag & 1, count=self.pools.read(bucket, slot))

    def entries(self) -> Iterator[SlotEntry]:
        for bucket in np.flatnonzero(self.occupancy).tolist():
            for slot in range(self.slots):
                found = self.entry(bucket, slot)
                if found is None:
                    continue
                primary = self.alternate(bucket, found.fingerprint) if found.flag else bucket
                yield SlotEntry(bucket, slot, self._key_of(primary, found.fingerprint), found.count)

    def items(self) -> Iterator[Tuple[int, int]]:
        for found in self.entries():
            yield found.key, found.count

    def dump_csv(self, target: Union[str, Path, TextIO]) -> None:
        """Write bucket,slot,key,count rows for debugging."""
        if isinstance(target, (str, Path)):
            with open(target, "w", newline="", encoding="utf-8") as fh:
                self.dump_csv(fh)
            return
        writer = csv.writer(target)
        writer.writerow(["bucket", "slot", "key", "count"])
        for found in self.entries():
            writer.writerow(found)

    def dumps(self) -> str:
        buffer = io.StringIO()
        self.dump_csv(buffer)
        return buffer.getvalue()
