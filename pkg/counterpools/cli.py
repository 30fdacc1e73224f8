"""
Benchmark harness: trace generation, sketch accuracy/throughput sweeps,
cuckoo histogram sweeps and lookup-table statistics, all written as CSV.

    python -m counterpools gen-trace --alpha 1.0 --length 1000000 --out zipf.cptr
    python -m counterpools bench-sketch --algo cm --memory-bytes 128K,256K --metric nrmse
    python -m counterpools bench-histogram --buckets-exp 14,15,16 --dataset zipf:1.0:1000000
    python -m counterpools tables --cache-dir ./tables
"""

import argparse
import csv
import sys
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, TextIO

from pydantic import BaseModel

from .config import env
from .errors import ContractError, CounterPoolsError, TableFullError
from .services.histogram import PooledCuckooTable
from .services.pool import PRESETS, PoolConfig, separate_slack_config_count
from .services.sketch import FailureStrategy, PooledSketch, make_sketch
from .services.snb import snb
from .services.table_cache import (
    cached_offset_table,
    cached_snb_table,
    offset_table_bytes,
    snb_table_bytes,
)
from .services.workload import (
    DEFAULT_HH_THRESHOLDS,
    DEFAULT_UNIVERSE,
    MetricsAccumulator,
    ZipfSpec,
    generate_zipf,
    heavy_hitter_are,
    measure_throughput,
    read_trace,
    write_trace,
)
from .utils.logger import configure, log, logger

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2

EXACTNESS_LIMIT = 10_000_000


class ExperimentRow(BaseModel):
    algorithm: str
    dataset: str
    memory_bytes: int
    pool_config: str
    failure_strategy: str
    metric_name: str
    metric_value: Optional[float] = None
    seed: int
    throughput_mops: float
    runtime_ns: int


ROW_FIELDS = list(ExperimentRow.model_fields)


class CsvSink:
    """Serializes rows from worker threads into one CSV stream."""

    def __init__(self, stream: TextIO, fields: Sequence[str] = ROW_FIELDS):
        self._writer = csv.DictWriter(stream, fieldnames=list(fields), lineterminator="\n")
        self._stream = stream
        self._lock = threading.Lock()
        self._writer.writeheader()

    def write(self, rows: Sequence) -> None:
        with self._lock:
            for row in rows:
                record = row.model_dump() if isinstance(row, BaseModel) else row
                self._writer.writerow({k: ("" if v is None else v) for k, v in record.items()})
            self._stream.flush()


class UsageError(Exception):
    pass


# --- flag parsing helpers ---

def parse_size(text: str) -> int:
    text = text.strip().upper().removesuffix("B")
    scale = 1
    if text.endswith("K"):
        scale, text = 1 << 10, text[:-1]
    elif text.endswith("M"):
        scale, text = 1 << 20, text[:-1]
    try:
        value = int(float(text) * scale)
    except ValueError:
        raise UsageError(f"bad memory size {text!r}") from None
    if value < 1:
        raise UsageError(f"memory size must be positive, got {value}")
    return value


def parse_float(text: str) -> float:
    """Float that also accepts powers of two written as 2^-12."""
    text = text.strip()
    try:
        if text.startswith("2^"):
            return 2.0 ** float(text[2:])
        return float(text)
    except ValueError:
        raise UsageError(f"bad number {text!r}") from None


def parse_list(text: str, convert: Callable) -> List:
    items = [part for part in text.split(",") if part.strip()]
    if not items:
        raise UsageError(f"empty list {text!r}")
    try:
        return [convert(part) for part in items]
    except ValueError:
        raise UsageError(f"bad list {text!r}") from None


class Dataset(BaseModel):
    label: str
    kind: str
    alpha: float = 1.0
    length: int = 0
    universe: int = DEFAULT_UNIVERSE
    path: Optional[str] = None

    def keys(self, seed: int) -> List[int]:
        if self.kind == "zipf":
            spec = ZipfSpec(alpha=self.alpha, length=self.length, universe=self.universe, seed=seed)
            return generate_zipf(spec).tolist()
        return list(read_trace(self.path))


def parse_dataset(text: str, universe: int) -> Dataset:
    kind, _, rest = text.partition(":")
    if kind == "trace" and rest:
        return Dataset(label=text, kind="trace", path=rest)
    if kind == "zipf":
        parts = rest.split(":")
        if len(parts) not in (2, 3):
            raise UsageError(f"dataset must be zipf:alpha:N[:universe], got {text!r}")
        try:
            alpha = float(parts[0])
            length = int(float(parts[1]))
            if len(parts) == 3:
                universe = int(float(parts[2]))
        except ValueError:
            raise UsageError(f"bad zipf dataset {text!r}") from None
        if alpha <= 0 or length < 1 or universe < 1:
            raise UsageError(f"zipf dataset needs alpha > 0, N >= 1, universe >= 1: {text!r}")
        return Dataset(label=text, kind="zipf", alpha=alpha, length=length, universe=universe)
    raise UsageError(f"dataset must be zipf:alpha:N or trace:path, got {text!r}")


def parse_metric(text: str) -> List[str]:
    """One metric flag; a bare "are" stands for every default heavy-hitter threshold."""
    name, _, arg = text.partition(":")
    if name in ("nrmse", "throughput", "failures", "widths") and not arg:
        return [name]
    if name == "are":
        thetas = [parse_float(arg)] if arg else DEFAULT_HH_THRESHOLDS
        return [f"are:{theta!r}" for theta in thetas]
    raise UsageError(f"unknown metric {text!r}")


def parse_pool_config(text: str) -> PoolConfig:
    try:
        return PoolConfig.parse(text)
    except ContractError as exc:
        raise UsageError(str(exc)) from None


# --- commands ---

def cmd_gen_trace(args) -> int:
    if args.file:
        keys = list(read_trace(args.file))
    else:
        spec = ZipfSpec(alpha=args.alpha, length=args.length, universe=args.universe, seed=args.seed)
        keys = generate_zipf(spec)
    count = write_trace(args.out, keys)
    log(f"wrote {count} keys to {args.out}")
    return EXIT_OK


def _run_stream(sketch, algo: str, keys: Sequence[int], acc: Optional[MetricsAccumulator]) -> int:
    update = sketch.update if algo == "cm" else sketch.conservative_update
    if acc is None:
        for key in keys:
            update(key)
        return len(keys)
    query = sketch.query
    for key in keys:
        update(key)
        acc.on_arrival_record(acc.observe(key), query(key))
    return len(keys)


def sketch_point(args, dataset: Dataset, keys: List[int], memory: int, seed: int) -> List[ExperimentRow]:
    def build():
        return make_sketch(args.variant, memory, rows=args.rows, config=args.pool_config,
                           strategy=args.failure, seed=seed)

    sketch = build()
    acc = MetricsAccumulator()
    start = time.perf_counter_ns()
    _run_stream(sketch, args.algo, keys, acc)
    runtime = max(1, time.perf_counter_ns() - start)

    pooled = isinstance(sketch, PooledSketch)
    base = dict(
        algorithm=f"{args.algo}-{args.variant}",
        dataset=dataset.label,
        memory_bytes=sketch.memory_bytes,
        pool_config=args.pool_config.label if pooled else "fixed32",
        failure_strategy=args.failure.label if pooled else "none",
        seed=seed,
        throughput_mops=len(keys) * 1e3 / runtime,
        runtime_ns=runtime,
    )
    rows = []
    for metric in args.metric:
        if metric == "nrmse":
            rows.append(ExperimentRow(**base, metric_name="nrmse", metric_value=acc.finalize_nrmse()))
        elif metric.startswith("are:"):
            theta = float(metric[4:])
            report = heavy_hitter_are(acc, theta, sketch.query)
            name = f"are:{theta:g}" if report.has_heavy_hitters else f"are:{theta:g}:no_heavy_hitters"
            rows.append(ExperimentRow(**base, metric_name=name, metric_value=report.are))
        elif metric == "throughput":
            report = measure_throughput(lambda: _run_stream(build(), args.algo, keys, None), args.repetitions)
            timed = dict(base, throughput_mops=report.mean_mops)
            rows.append(ExperimentRow(**timed, metric_name="throughput", metric_value=report.mean_mops))
            rows.append(ExperimentRow(**timed, metric_name="throughput_std", metric_value=report.std_mops))
        elif metric == "failures" and pooled:
            rows.append(ExperimentRow(**base, metric_name="failed_pools", metric_value=sketch.failed_pools))
            rows.append(ExperimentRow(**base, metric_name="merged_pools", metric_value=sketch.merged_pools))
        elif metric == "widths" and pooled:
            for width, count in sketch.width_histogram().items():
                rows.append(ExperimentRow(**base, metric_name=f"width:{width}", metric_value=count))
    logger.info("{} {} {}B seed={} done in {:.2f}s", base["algorithm"], dataset.label, memory, seed, runtime / 1e9)
    return rows


def _sweep(sink: CsvSink, workers: int, points: List[Callable[[], List[ExperimentRow]]]) -> None:
    if workers <= 1:
        for point in points:
            sink.write(point())
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda point: sink.write(point()), points))


def cmd_bench_sketch(args) -> int:
    dataset = args.dataset
    with _open_out(args.out) as stream:
        sink = CsvSink(stream)
        for seed in args.seeds:
            keys = dataset.keys(seed)
            points = [
                (lambda memory=memory, seed=seed: sketch_point(args, dataset, keys, memory, seed))
                for memory in args.memory_bytes
            ]
            _sweep(sink, args.workers, points)
    return EXIT_OK


def _fill_table(table: PooledCuckooTable, keys: Sequence[int]) -> int:
    full = 0
    for key in keys:
        try:
            table.increment(key)
        except TableFullError:
            full += 1
    return full


def histogram_point(args, dataset: Dataset, keys: List[int], bucket_exp: int, seed: int) -> List[ExperimentRow]:
    def build():
        return PooledCuckooTable(bucket_exp, key_bits=args.key_bits, config=args.pool_config, seed=seed)

    table = build()
    start = time.perf_counter_ns()
    full = _fill_table(table, keys)
    runtime = max(1, time.perf_counter_ns() - start)

    oracle = Counter(keys)
    exact = None
    if len(keys) <= EXACTNESS_LIMIT:
        exact = float(full == 0 and dict(table.items()) == dict(oracle))
    base = dict(
        algorithm="cuckoo-pooled",
        dataset=dataset.label,
        memory_bytes=table.memory_bytes,
        pool_config=args.pool_config.label,
        failure_strategy="migrate",
        seed=seed,
        throughput_mops=len(keys) * 1e3 / runtime,
        runtime_ns=runtime,
    )
    rows = [
        ExperimentRow(**base, metric_name="load_factor", metric_value=table.load_factor()),
        ExperimentRow(**base, metric_name="bytes_per_flow", metric_value=table.memory_bytes / max(1, len(oracle))),
        ExperimentRow(**base, metric_name="table_full", metric_value=full),
        ExperimentRow(**base, metric_name="exact", metric_value=exact),
    ]
    if args.repetitions:
        def refill() -> int:
            _fill_table(build(), keys)
            return len(keys)

        report = measure_throughput(refill, args.repetitions)
        timed = dict(base, throughput_mops=report.mean_mops)
        rows.append(ExperimentRow(**timed, metric_name="throughput", metric_value=report.mean_mops))
        rows.append(ExperimentRow(**timed, metric_name="throughput_std", metric_value=report.std_mops))
    logger.info("cuckoo b={} {} seed={} load={:.3f} full={}", bucket_exp, dataset.label, seed, table.load_factor(), full)
    return rows


def cmd_bench_histogram(args) -> int:
    dataset = args.dataset
    with _open_out(args.out) as stream:
        sink = CsvSink(stream)
        for seed in args.seeds:
            keys = dataset.keys(seed)
            points = [
                (lambda b=b, seed=seed: histogram_point(args, dataset, keys, b, seed))
                for b in args.buckets_exp
            ]
            _sweep(sink, args.workers, points)
    return EXIT_OK


TABLE_FIELDS = [
    "pool_config", "budget", "config_count", "config_bits", "separate_slack_configs",
    "snb_entries", "snb_bytes", "offset_entries", "offset_bytes",
]


def cmd_tables(args) -> int:
    directory = Path(args.cache_dir) if args.cache_dir else env.table_dir()
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
    with _open_out(args.out) as stream:
        sink = CsvSink(stream, TABLE_FIELDS)
        for config in args.pool_config:
            snb_table = cached_snb_table(max(config.budget, 1), config.k, directory)
            offsets = cached_offset_table(config, directory)
            sink.write([{
                "pool_config": config.label,
                "budget": config.budget,
                "config_count": snb(config.budget, config.k),
                "config_bits": config.config_bits,
                "separate_slack_configs": separate_slack_config_count(config),
                "snb_entries": int(snb_table.entries.size),
                "snb_bytes": len(snb_table_bytes(snb_table)),
                "offset_entries": len(offsets),
                "offset_bytes": len(offset_table_bytes(offsets)),
            }])
    return EXIT_OK


class _open_out:
    """Context manager yielding the output file, or stdout for None / "-"."""

    def __init__(self, path: Optional[str]):
        self.path = path
        self._fh = None

    def __enter__(self) -> TextIO:
        if not self.path or self.path == "-":
            return sys.stdout
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        return self._fh

    def __exit__(self, *exc):
        if self._fh is not None:
            self._fh.close()
        return False


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="counterpools", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("--log-level", default=env.LOG_LEVEL, help="loguru level for stderr diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-trace", help="write a binary key trace")
    source = gen.add_mutually_exclusive_group(required=True)
    source.add_argument("--alpha", type=float, help="Zipf skew")
    source.add_argument("--file", help="convert an existing CSV or binary trace")
    gen.add_argument("--length", "-n", type=int, default=1_000_000, help="Number of keys")
    gen.add_argument("--universe", "-m", type=int, default=DEFAULT_UNIVERSE, help="Number of distinct ranks")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=cmd_gen_trace)

    bench = sub.add_parser("bench-sketch", help="sketch accuracy / throughput sweep")
    bench.add_argument("--algo", choices=("cm", "cu"), default="cm")
    bench.add_argument("--variant", choices=("pooled", "baseline32"), default="pooled")
    bench.add_argument("--memory-bytes", default="64K", help="comma list, K/M suffixes allowed")
    bench.add_argument("--rows", type=int, default=4)
    bench.add_argument("--pool-config", default=None, help="n,k,s,i")
    bench.add_argument("--failure", default=None, help="ignore | offload[:fraction] | merge")
    bench.add_argument("--dataset", default="zipf:1.0:100000", help="zipf:alpha:N[:universe] | trace:path")
    bench.add_argument("--universe", type=int, default=DEFAULT_UNIVERSE)
    bench.add_argument("--metric", action="append", default=None,
                       help="nrmse | are[:theta] | throughput | failures | widths (repeatable; "
                            "bare are sweeps theta = 2^-15 .. 2^-7)")
    bench.add_argument("--seeds", default="1")
    bench.add_argument("--repetitions", type=int, default=5)
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--out", default=None)
    bench.set_defaults(handler=cmd_bench_sketch)

    hist = sub.add_parser("bench-histogram", help="exact cuckoo histogram sweep")
    hist.add_argument("--buckets-exp", default="17", help="comma list of bucket-count exponents")
    hist.add_argument("--key-bits", type=int, default=32)
    hist.add_argument("--pool-config", default=None, help="n,k,s,i")
    hist.add_argument("--dataset", default="zipf:1.0:1000000:131072")
    hist.add_argument("--universe", type=int, default=1 << 17)
    hist.add_argument("--seeds", default="1")
    hist.add_argument("--repetitions", type=int, default=0, help="throughput repetitions (0 = skip)")
    hist.add_argument("--workers", type=int, default=1)
    hist.add_argument("--out", default=None)
    hist.set_defaults(handler=cmd_bench_histogram)

    tables = sub.add_parser("tables", help="build lookup tables and report their sizes")
    tables.add_argument("--pool-config", action="append", default=None, help="n,k,s,i (repeatable)")
    tables.add_argument("--cache-dir", default=None, help=f"defaults to ${env.TABLE_DIR_VAR}")
    tables.add_argument("--out", default=None)
    tables.set_defaults(handler=cmd_tables)
    return parser


def _normalize(args) -> None:
    """Turn raw flag strings into typed values; raises UsageError on bad combinations."""
    if args.command == "gen-trace":
        if args.alpha is not None and args.alpha <= 0:
            raise UsageError("--alpha must be positive")
        if args.length < 0 or args.universe < 1:
            raise UsageError("--length must be >= 0 and --universe >= 1")
        return

    if args.command == "tables":
        texts = args.pool_config or list(PRESETS)
        args.pool_config = [parse_pool_config(text) for text in texts]
        return

    if args.command == "bench-sketch":
        if args.variant == "baseline32" and (args.pool_config or args.failure):
            raise UsageError("--pool-config and --failure only apply to --variant pooled")
        args.pool_config = parse_pool_config(args.pool_config or env.DEFAULT_PRESET)
        try:
            args.failure = FailureStrategy.parse(args.failure or "merge")
        except ContractError as exc:
            raise UsageError(str(exc)) from None
        args.memory_bytes = parse_list(args.memory_bytes, parse_size)
        args.metric = [name for m in (args.metric or ["nrmse"]) for name in parse_metric(m)]
        if args.variant == "baseline32" and any(m in ("failures", "widths") for m in args.metric):
            raise UsageError("failures / widths metrics need --variant pooled")
        if args.rows < 1:
            raise UsageError("--rows must be positive")
        for memory in args.memory_bytes:
            try:
                make_sketch(args.variant, memory, rows=args.rows, config=args.pool_config, strategy=args.failure)
            except ContractError as exc:
                raise UsageError(str(exc)) from None
    else:
        args.pool_config = parse_pool_config(args.pool_config or env.DEFAULT_PRESET)
        args.buckets_exp = parse_list(args.buckets_exp, int)
        if any(not 0 <= b < args.key_bits for b in args.buckets_exp):
            raise UsageError("--buckets-exp values must lie in [0, key_bits)")

    args.dataset = parse_dataset(args.dataset, args.universe)
    args.seeds = parse_list(args.seeds, int)
    if args.workers < 1 or args.repetitions < 0:
        raise UsageError("--workers must be >= 1 and --repetitions >= 0")
    if args.command == "bench-sketch" and "throughput" in args.metric and args.repetitions < 1:
        raise UsageError("throughput metric needs --repetitions >= 1")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure(args.log_level)
    try:
        _normalize(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args)
    except CounterPoolsError as exc:
        logger.error("{}: {}", type(exc).__name__, exc)
        return EXIT_INTERNAL
    except Exception:
        logger.exception("unexpected failure in {}", args.command)
        return EXIT_INTERNAL
