import math

import numpy as np
import pytest

from counterpools.errors import ContractError, MetricsError, TableTooLargeError, TraceFormatError
from counterpools.services.workload import (
    TRACE_HEADER,
    MetricsAccumulator,
    ZipfSpec,
    generate_zipf,
    heavy_hitter_are,
    measure_throughput,
    read_trace,
    write_trace,
)


def test_zipf_is_deterministic_and_in_range():
    spec = ZipfSpec(alpha=1.0, universe=1000, length=20000, seed=7)
    keys = generate_zipf(spec)
    assert keys.dtype == np.uint64
    assert len(keys) == 20000
    assert keys.min() >= 1 and keys.max() <= 1000
    assert np.array_equal(keys, generate_zipf(spec))
    assert not np.array_equal(keys, generate_zipf(spec.model_copy(update={"seed": 8})))


def test_zipf_rank_one_dominates():
    keys = generate_zipf(ZipfSpec(alpha=1.2, universe=500, length=50000, seed=1))
    counts = np.bincount(keys.astype(np.int64))
    assert counts.argmax() == 1
    # P(rank 1) = 1 / H(500, 1.2)
    expected = 50000 / sum(r ** -1.2 for r in range(1, 501))
    assert abs(counts[1] - expected) < 0.05 * expected


def test_zipf_steep_alpha_is_almost_all_rank_one():
    keys = generate_zipf(ZipfSpec(alpha=10.0, universe=1000, length=10000, seed=2))
    assert np.count_nonzero(keys == 1) > 0.99 * len(keys)


def test_zipf_log_log_slope_matches_alpha():
    keys = generate_zipf(ZipfSpec(alpha=1.0, universe=1_000_000, length=1_000_000, seed=4))
    counts = np.bincount(keys.astype(np.int64), minlength=1001)[1:1001]
    ranks = np.arange(1, 1001)
    slope, _ = np.polyfit(np.log(ranks), np.log(counts), 1)
    assert abs(slope + 1.0) < 0.1


def test_zipf_limits():
    with pytest.raises(TableTooLargeError):
        generate_zipf(ZipfSpec(alpha=1.0, universe=(1 << 27) + 1, length=10))
    with pytest.raises(ValueError):
        ZipfSpec(alpha=0.0)
    assert len(generate_zipf(ZipfSpec(alpha=1.0, universe=10, length=0))) == 0


def test_trace_round_trip(tmp_path):
    path = tmp_path / "trace.cptr"
    keys = [1, 2, 3, (1 << 64) - 1, 0]
    assert write_trace(path, keys) == 5
    assert path.stat().st_size == TRACE_HEADER.size + 8 * 5 == 56
    assert list(read_trace(path)) == keys


def test_csv_trace(tmp_path):
    path = tmp_path / "keys.csv"
    path.write_text("5\n7\n\n5\n")
    assert list(read_trace(path)) == [5, 7, 5]
    path.write_text("5\nnope\n")
    with pytest.raises(TraceFormatError):
        list(read_trace(path))
    with pytest.raises(ContractError):
        read_trace(path, fmt="parquet")


def test_truncated_trace_reports_offset(tmp_path):
    path = tmp_path / "trace.cptr"
    write_trace(path, range(10))
    data = path.read_bytes()
    path.write_bytes(data[:-12])
    with pytest.raises(TraceFormatError) as excinfo:
        list(read_trace(path))
    assert excinfo.value.offset == TRACE_HEADER.size + 8 * 8

    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(TraceFormatError) as excinfo:
        list(read_trace(path))
    assert excinfo.value.offset == 0

    path.write_bytes(data[:7])
    with pytest.raises(TraceFormatError):
        list(read_trace(path))


def test_nrmse():
    acc = MetricsAccumulator()
    with pytest.raises(MetricsError):
        acc.finalize_nrmse()
    acc.on_arrival_record(acc.observe(4), 3)
    acc.on_arrival_record(acc.observe(4), 2)
    assert acc.stream_length == 2
    assert acc.finalize_nrmse() == pytest.approx(math.sqrt(2) / 2)

    exact = MetricsAccumulator()
    for key in (1, 1, 2):
        exact.on_arrival_record(exact.observe(key), exact.counts[key])
    assert exact.finalize_nrmse() == 0.0


def test_heavy_hitter_are():
    acc = MetricsAccumulator()
    for key in [1] * 50 + [2] * 30 + list(range(3, 23)):
        acc.observe(key)
    estimates = {1: 60, 2: 30}
    report = heavy_hitter_are(acc, 0.25, lambda key: estimates.get(key, 1))
    assert report.heavy_hitters == 2
    assert report.are == pytest.approx((10 / 50 + 0) / 2)

    none = heavy_hitter_are(acc, 0.9, lambda key: 0)
    assert not none.has_heavy_hitters
    assert none.are is None
    assert heavy_hitter_are(acc, 40, lambda key: 50, absolute=True).heavy_hitters == 1


def test_measure_throughput():
    calls = []

    def run():
        calls.append(sum(range(2000)))
        return 2000

    report = measure_throughput(run, repetitions=3)
    assert len(calls) == 4
    assert len(report.samples) == 3
    assert report.mean_mops > 0
    assert report.std_mops >= 0
    with pytest.raises(ContractError):
        measure_throughput(run, repetitions=0)
