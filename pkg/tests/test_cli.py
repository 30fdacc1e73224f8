import csv

import pytest

from counterpools.cli import (
    EXIT_INTERNAL,
    EXIT_OK,
    EXIT_USAGE,
    ROW_FIELDS,
    UsageError,
    main,
    parse_dataset,
    parse_metric,
    parse_size,
)
from counterpools.services.workload import DEFAULT_HH_THRESHOLDS, TRACE_HEADER, read_trace


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return reader.fieldnames, list(reader)


def test_flag_helpers():
    assert parse_size("64K") == 65536
    assert parse_size("1M") == 1 << 20
    assert parse_size("16KB") == 16384
    assert parse_size("1000") == 1000
    with pytest.raises(UsageError):
        parse_size("lots")
    assert parse_metric("are:2^-12") == [f"are:{2.0 ** -12!r}"]
    assert parse_metric("nrmse") == ["nrmse"]
    assert len(parse_metric("are")) == len(DEFAULT_HH_THRESHOLDS) == 9
    with pytest.raises(UsageError):
        parse_metric("speed")
    dataset = parse_dataset("zipf:1.2:5000:300", universe=10)
    assert (dataset.alpha, dataset.length, dataset.universe) == (1.2, 5000, 300)
    assert parse_dataset("trace:/tmp/x.cptr", universe=10).path == "/tmp/x.cptr"
    with pytest.raises(UsageError):
        parse_dataset("uniform:5", universe=10)


def test_gen_trace(tmp_path):
    out = tmp_path / "zipf.cptr"
    argv = ["gen-trace", "--alpha", "1.0", "--length", "1000", "--universe", "100", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert out.stat().st_size == TRACE_HEADER.size + 8 * 1000

    source = tmp_path / "keys.csv"
    source.write_text("3\n1\n4\n")
    converted = tmp_path / "keys.cptr"
    assert main(["gen-trace", "--file", str(source), "--out", str(converted)]) == EXIT_OK
    assert list(read_trace(converted)) == [3, 1, 4]


def test_bench_sketch_writes_schema_rows(tmp_path):
    out = tmp_path / "sketch.csv"
    argv = [
        "bench-sketch", "--algo", "cu", "--memory-bytes", "2K,4K",
        "--dataset", "zipf:1.0:3000:800", "--metric", "nrmse", "--metric", "are:2^-6",
        "--metric", "failures", "--metric", "widths", "--seeds", "1,2", "--out", str(out),
    ]
    assert main(argv) == EXIT_OK
    fields, rows = read_rows(out)
    assert fields == ROW_FIELDS
    names = {row["metric_name"] for row in rows}
    assert {"nrmse", "are:0.015625", "failed_pools", "merged_pools"} <= names
    assert any(name.startswith("width:") for name in names)
    assert {row["seed"] for row in rows} == {"1", "2"}
    assert {row["algorithm"] for row in rows} == {"cu-pooled"}
    for row in rows:
        assert int(row["memory_bytes"]) <= 4096
        assert float(row["throughput_mops"]) > 0
        assert int(row["runtime_ns"]) > 0


def test_bare_are_sweeps_default_thresholds(tmp_path):
    out = tmp_path / "are.csv"
    argv = [
        "bench-sketch", "--memory-bytes", "4K", "--dataset", "zipf:1.0:2000:500",
        "--metric", "are", "--seeds", "1", "--out", str(out),
    ]
    assert main(argv) == EXIT_OK
    _, rows = read_rows(out)
    names = [row["metric_name"] for row in rows]
    assert len(names) == 9
    assert all(name.startswith("are:") for name in names)
    thetas = sorted(float(name.split(":")[1]) for name in names)
    assert thetas == pytest.approx(sorted(DEFAULT_HH_THRESHOLDS), rel=1e-5)


def test_bench_sketch_throughput_with_workers(tmp_path):
    out = tmp_path / "tp.csv"
    argv = [
        "bench-sketch", "--variant", "baseline32", "--memory-bytes", "4K,8K,16K",
        "--dataset", "zipf:1.0:500:100", "--metric", "throughput", "--repetitions", "2",
        "--workers", "3", "--out", str(out),
    ]
    assert main(argv) == EXIT_OK
    _, rows = read_rows(out)
    throughput = [row for row in rows if row["metric_name"] == "throughput"]
    assert len(throughput) == 3
    assert all(float(row["metric_value"]) > 0 for row in throughput)
    assert {row["pool_config"] for row in rows} == {"fixed32"}


def test_bench_histogram_is_exact(tmp_path):
    out = tmp_path / "hist.csv"
    argv = [
        "bench-histogram", "--buckets-exp", "8,9", "--dataset", "zipf:1.0:5000:600",
        "--repetitions", "1", "--out", str(out),
    ]
    assert main(argv) == EXIT_OK
    _, rows = read_rows(out)
    exact = [row for row in rows if row["metric_name"] == "exact"]
    assert [float(row["metric_value"]) for row in exact] == [1.0, 1.0]
    full = [row for row in rows if row["metric_name"] == "table_full"]
    assert all(float(row["metric_value"]) == 0 for row in full)
    assert any(row["metric_name"] == "throughput" for row in rows)


def test_tables_reports_presets_and_writes_cache(tmp_path):
    out = tmp_path / "tables.csv"
    cache = tmp_path / "cache"
    argv = ["tables", "--pool-config", "64,5,8,4", "--pool-config", "64,6,7,4",
            "--cache-dir", str(cache), "--out", str(out)]
    assert main(argv) == EXIT_OK
    _, rows = read_rows(out)
    assert [row["config_count"] for row in rows] == ["210", "252"]
    assert {row["config_bits"] for row in rows} == {"8"}
    assert sorted(p.suffix for p in cache.iterdir()) == [".cplt", ".cplt", ".snbt", ".snbt"]


@pytest.mark.parametrize("argv", [
    ["bench-sketch", "--variant", "baseline32", "--failure", "merge"],
    ["bench-sketch", "--memory-bytes", "12"],
    ["bench-sketch", "--metric", "speed"],
    ["bench-sketch", "--pool-config", "64,4"],
    ["bench-sketch", "--dataset", "zipf:0:100"],
    ["bench-histogram", "--buckets-exp", "40"],
    ["tables", "--pool-config", "64,100,1,1"],
])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_argparse_errors_exit_with_usage_code():
    with pytest.raises(SystemExit) as excinfo:
        main(["no-such-command"])
    assert excinfo.value.code == EXIT_USAGE


def test_missing_trace_is_an_internal_error(tmp_path):
    argv = ["bench-sketch", "--dataset", f"trace:{tmp_path / 'missing.cptr'}", "--out", str(tmp_path / "o.csv")]
    assert main(argv) == EXIT_INTERNAL


def test_gen_trace_is_reproducible(tmp_path):
    paths = [tmp_path / "a.cptr", tmp_path / "b.cptr"]
    for path in paths:
        argv = ["gen-trace", "--alpha", "1.2", "--length", "300", "--universe", "1000", "--seed", "4", "--out", str(path)]
        assert main(argv) == EXIT_OK
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_unwritable_output_is_an_internal_error(tmp_path):
    out = tmp_path / "missing-dir" / "trace.cptr"
    assert main(["gen-trace", "--alpha", "1.0", "--length", "10", "--universe", "50", "--out", str(out)]) == EXIT_INTERNAL
