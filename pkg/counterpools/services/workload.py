"""
Streams and metrics for the experiments: Zipf generation, trace files,
on-arrival NRMSE, heavy-hitter ARE and throughput measurement.
"""

import csv
import struct
import time
from collections import Counter
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..errors import ContractError, MetricsError, TableTooLargeError, TraceFormatError
from ..utils.logger import logger

MAX_UNIVERSE = 1 << 27
DEFAULT_UNIVERSE = 1 << 24
DEFAULT_LENGTH = 5_000_000

TRACE_MAGIC = b"CPTR"
TRACE_VERSION = 1
# magic, version, 3 pad bytes, u64 record count
TRACE_HEADER = struct.Struct("<4sB3xQ")
TRACE_CHUNK = 1 << 16

# 2^-15 .. 2^-7 of the stream length
DEFAULT_HH_THRESHOLDS = tuple(2.0 ** -e for e in range(15, 6, -1))


class ZipfSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=1.0, gt=0)
    universe: int = Field(default=DEFAULT_UNIVERSE, ge=1)
    length: int = Field(default=DEFAULT_LENGTH, ge=0)
    seed: int = 0


_ZIPF_BATCH = 1 << 20


def _zipf_cdf(alpha: float, universe: int) -> np.ndarray:
    if universe > MAX_UNIVERSE:
        raise TableTooLargeError(f"universe {universe} above the {MAX_UNIVERSE} rank limit")
    weights = np.power(np.arange(1, universe + 1, dtype=np.float64), -alpha)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return cdf


def generate_zipf(spec: ZipfSpec) -> np.ndarray:
    """`spec.length` keys with P(rank r) proportional to r^-alpha; key = rank (1-based)."""
    cdf = _zipf_cdf(spec.alpha, spec.universe)
    rng = np.random.default_rng(spec.seed)
    keys = np.empty(spec.length, dtype=np.uint64)
    for start in range(0, spec.length, _ZIPF_BATCH):
        stop = min(spec.length, start + _ZIPF_BATCH)
        draws = rng.random(stop - start)
        ranks = np.searchsorted(cdf, draws, side="right")
        # guard the float edge where a draw lands past the final cdf entry
        np.minimum(ranks, spec.universe - 1, out=ranks)
        keys[start:stop] = ranks + 1
    return keys


def write_trace(path: Union[str, Path], keys: Iterable[int]) -> int:
    """Write a binary trace; returns the record count."""
    if not isinstance(keys, np.ndarray):
        keys = np.asarray(list(keys), dtype=np.uint64)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(TRACE_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, len(keys)))
        fh.write(keys.astype("<u8").tobytes())
    logger.debug("wrote {} keys to {}", len(keys), path)
    return len(keys)


def _read_binary_trace(path: Path) -> Iterator[int]:
    with path.open("rb") as fh:
        header = fh.read(TRACE_HEADER.size)
        if len(header) < TRACE_HEADER.size:
            raise TraceFormatError("truncated trace header", offset=len(header))
        magic, version, count = TRACE_HEADER.unpack(header)
        if magic != TRACE_MAGIC:
            raise TraceFormatError(f"bad trace magic {magic!r}", offset=0)
        if version != TRACE_VERSION:
            raise TraceFormatError(f"unsupported trace version {version}", offset=4)
        offset = TRACE_HEADER.size
        remaining = count
        while remaining:
            want = min(remaining, TRACE_CHUNK)
            chunk = fh.read(want * 8)
            if len(chunk) < want * 8:
                complete = len(chunk) // 8
                raise TraceFormatError(
                    f"trace truncated: expected {count} records",
                    offset=offset + complete * 8,
                )
            yield from np.frombuffer(chunk, dtype="<u8").tolist()
            offset += len(chunk)
            remaining -= want


def _read_csv_trace(path: Path) -> Iterator[int]:
    with path.open("r", newline="", encoding="utf-8") as fh:
        for line_number, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            try:
                key = int(row[0].strip())
            except ValueError:
                raise TraceFormatError(f"line {line_number}: not a decimal key: {row[0]!r}") from None
            if not 0 <= key < (1 << 64):
                raise TraceFormatError(f"line {line_number}: key {key} outside 64 bits")
            yield key


def read_trace(path: Union[str, Path], fmt: str = "auto") -> Iterator[int]:
    """Stream keys from a binary trace or a one-key-per-line CSV file."""
    path = Path(path)
    if fmt == "auto":
        fmt = "csv" if path.suffix.lower() in (".csv", ".txt") else "binary"
    if fmt == "csv":
        return _read_csv_trace(path)
    if fmt == "binary":
        return _read_binary_trace(path)
    raise ContractError(f"unknown trace format {fmt!r}")


class MetricsAccumulator:
    """
    On-arrival error bookkeeping. Per item the caller updates the sketch,
    then calls observe(key) for the exact count f_i (this item included) and
    on_arrival_record(f_i, estimate).
    """

    def __init__(self):
        self.n = 0
        self.squared_error = 0
        self.counts = Counter()

    def observe(self, key: int) -> int:
        self.counts[key] += 1
        return self.counts[key]

    def on_arrival_record(self, true_count: int, estimate: int) -> None:
        self.n += 1
        self.squared_error += (true_count - estimate) ** 2

    def finalize_nrmse(self) -> float:
        if self.n == 0:
            raise MetricsError("no items recorded")
        mse = self.squared_error / self.n
        return float(np.sqrt(mse)) / self.n

    @property
    def stream_length(self) -> int:
        return sum(self.counts.values())


class AreReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    heavy_hitters: int
    are: Optional[float] = None

    @property
    def has_heavy_hitters(self) -> bool:
        return self.heavy_hitters > 0


def heavy_hitter_are(acc: MetricsAccumulator, theta: float, estimate: Callable[[int], int],
                     absolute: bool = False) -> AreReport:
    """ARE over keys whose final count reaches theta * N (or theta itself when absolute)."""
    threshold = theta if absolute else theta * acc.stream_length
    heavy = [(key, count) for key, count in acc.counts.items() if count >= threshold]
    if not heavy:
        return AreReport(heavy_hitters=0)
    total = sum(abs(count - estimate(key)) / count for key, count in heavy)
    return AreReport(heavy_hitters=len(heavy), are=total / len(heavy))


class ThroughputReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean_mops: float
    std_mops: float
    samples: List[float]


def measure_throughput(run: Callable[[], int], repetitions: int = 5) -> ThroughputReport:
    """Time `run` (which returns its operation count) after one untimed warm-up pass."""
    if repetitions < 1:
        raise ContractError("need at least one repetition")
    run()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        operations = run()
        elapsed = max(1, time.perf_counter_ns() - start)
        samples.append(operations * 1e3 / elapsed)
    values = np.asarray(samples)
    return ThroughputReport(
        mean_mops=float(values.mean()),
        std_mops=float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        samples=samples,
    )
