"""Exception hierarchy shared by every counterpools module."""

from typing import List, Optional, Tuple


class CounterPoolsError(Exception):
    """Root of all library errors."""


class SnBRangeError(CounterPoolsError, OverflowError):
    """A stars-and-bars count does not fit in 64 unsigned bits."""


class ContractError(CounterPoolsError, ValueError):
    """A caller violated an operation's precondition."""


class TableTooLargeError(CounterPoolsError):
    """A lookup table would exceed the tabulation limit."""


class CacheFormatError(CounterPoolsError):
    """A lookup-table cache file is malformed or does not match the request."""


class MetricsError(CounterPoolsError):
    """A metric was finalized without any observations."""


class TraceFormatError(CounterPoolsError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class TableFullError(CounterPoolsError):
    """An eviction chain ran past MAX_KICKS.

    `entries` lists the (key, count) pairs that could not be re-homed; every
    other key in the table keeps its exact count.
    """

    def __init__(self, entries: List[Tuple[int, int]]):
        self.entries = entries
        super().__init__(
            f"cuckoo table full: {len(entries)} entr{'y' if len(entries) == 1 else 'ies'} left unplaced"
        )
