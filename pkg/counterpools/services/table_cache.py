"""
Binary cache files for the lookup tables.

SNBT: b"SNBT", version byte, n and k as u16 LE, then every T entry as u64 LE,
row-major over (a, b, c).
CPLT: b"CPLT", (n, k, s, i) as four u16 LE, then one packed-offset word per
configuration number (u32 LE, or u64 LE when the offsets need more bits).
"""

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..config.env import table_dir
from ..errors import CacheFormatError
from ..utils.logger import logger
from .pool import OffsetTable, PoolConfig, build_offset_table
from .snb import SnBTable, build_snb_table

SNB_MAGIC = b"SNBT"
SNB_VERSION = 1
SNB_HEADER = struct.Struct("<4sBHH")

OFFSET_MAGIC = b"CPLT"
OFFSET_HEADER = struct.Struct("<4sHHHH")


def snb_table_path(directory: Path, n: int, k: int) -> Path:
    return Path(directory) / f"snb_{n}_{k}.snbt"


def offset_table_path(directory: Path, config: PoolConfig) -> Path:
    return Path(directory) / f"offsets_{config.n}_{config.k}_{config.s}_{config.i}.cplt"


def snb_table_bytes(table: SnBTable) -> bytes:
    header = SNB_HEADER.pack(SNB_MAGIC, SNB_VERSION, table.n, table.k)
    return header + table.entries.astype("<u8").tobytes()


def snb_table_from_bytes(data: bytes) -> SnBTable:
    if len(data) < SNB_HEADER.size:
        raise CacheFormatError("snb table cache shorter than its header")
    magic, version, n, k = SNB_HEADER.unpack_from(data)
    if magic != SNB_MAGIC:
        raise CacheFormatError(f"bad snb table magic {magic!r}")
    if version != SNB_VERSION:
        raise CacheFormatError(f"unsupported snb table version {version}")
    expected = (n + 1) * (k + 1) * (n + 2)
    if (len(data) - SNB_HEADER.size) % 8:
        raise CacheFormatError("snb table cache ends inside an entry")
    payload = np.frombuffer(data, dtype="<u8", offset=SNB_HEADER.size)
    if payload.size != expected:
        raise CacheFormatError(f"snb table ({n}, {k}) needs {expected} entries, found {payload.size}")
    return SnBTable.from_entries(n, k, payload.astype(np.uint64))


def offset_table_bytes(table: OffsetTable) -> bytes:
    config = table.config
    header = OFFSET_HEADER.pack(OFFSET_MAGIC, config.n, config.k, config.s, config.i)
    dtype = "<u4" if table.word_bits == 32 else "<u8"
    return header + table.packed().astype(dtype).tobytes()


def offset_table_from_bytes(data: bytes) -> OffsetTable:
    if len(data) < OFFSET_HEADER.size:
        raise CacheFormatError("offset table cache shorter than its header")
    magic, n, k, s, i = OFFSET_HEADER.unpack_from(data)
    if magic != OFFSET_MAGIC:
        raise CacheFormatError(f"bad offset table magic {magic!r}")
    try:
        config = PoolConfig(n=n, k=k, s=s, i=i)
    except ValueError as exc:
        raise CacheFormatError(f"offset table header holds an invalid pool config: {exc}") from None
    word_bits = 32 if (k - 1) * n.bit_length() <= 32 else 64
    if (len(data) - OFFSET_HEADER.size) % (word_bits // 8):
        raise CacheFormatError("offset table cache ends inside an entry")
    words = np.frombuffer(data, dtype="<u4" if word_bits == 32 else "<u8", offset=OFFSET_HEADER.size)
    if words.size != config.config_count:
        raise CacheFormatError(
            f"offset table {config} needs {config.config_count} entries, found {words.size}"
        )
    return OffsetTable.from_packed(config, words)


def save_snb_table(table: SnBTable, directory: Path) -> Path:
    path = snb_table_path(directory, table.n, table.k)
    path.write_bytes(snb_table_bytes(table))
    logger.info("wrote snb table cache {}", path)
    return path


def load_snb_table(n: int, k: int, directory: Path) -> Optional[SnBTable]:
    path = snb_table_path(directory, n, k)
    if not path.exists():
        return None
    table = snb_table_from_bytes(path.read_bytes())
    if (table.n, table.k) != (n, k):
        raise CacheFormatError(f"{path} holds table ({table.n}, {table.k}), expected ({n}, {k})")
    logger.debug("loaded snb table cache {}", path)
    return table


def save_offset_table(table: OffsetTable, directory: Path) -> Path:
    path = offset_table_path(directory, table.config)
    path.write_bytes(offset_table_bytes(table))
    logger.info("wrote offset table cache {}", path)
    return path


def load_offset_table(config: PoolConfig, directory: Path) -> Optional[OffsetTable]:
    path = offset_table_path(directory, config)
    if not path.exists():
        return None
    table = offset_table_from_bytes(path.read_bytes())
    if table.config != config:
        raise CacheFormatError(f"{path} holds {table.config}, expected {config}")
    logger.debug("loaded offset table cache {}", path)
    return table


def cached_snb_table(n: int, k: int, directory: Optional[Path] = None) -> SnBTable:
    directory = directory or table_dir()
    if directory is None:
        return build_snb_table(n, k)
    table = load_snb_table(n, k, directory)
    if table is None:
        table = build_snb_table(n, k)
        save_snb_table(table, directory)
    return table


def cached_offset_table(config: PoolConfig, directory: Optional[Path] = None) -> OffsetTable:
    directory = directory or table_dir()
    if directory is None:
        return build_offset_table(config)
    table = load_offset_table(config, directory)
    if table is None:
        table = build_offset_table(config)
        save_offset_table(table, directory)
    return table
