import random

import pytest

from counterpools.errors import ContractError, TableTooLargeError
from counterpools.services.pool import (
    DEFAULT_CONFIG,
    PRESETS,
    Pool,
    PoolArray,
    PoolConfig,
    PoolUpdateOutcome,
    build_offset_table,
    get_codec,
    get_offset_table,
    separate_slack_config_count,
    separate_slack_encode,
)
from counterpools.services.snb import snb


def bits_needed(value, s, i, extra=0):
    excess = value.bit_length() - s - extra
    return 0 if excess <= 0 else -(-excess // i)


class ReferencePool:
    """Plain big-integer model: k exact values and their canonical widths."""

    def __init__(self, config):
        self.config = config
        self.values = [0] * config.k

    def demand(self, values):
        c = self.config
        inner = sum(bits_needed(v, c.s, c.i) for v in values[:-1])
        return inner + bits_needed(values[-1], c.s, c.i, c.remainder)

    def increment(self, j, w):
        trial = list(self.values)
        trial[j] += w
        if self.demand(trial) > self.config.budget:
            return False
        self.values = trial
        return True

    def widths(self):
        c = self.config
        inner = [c.s + c.i * bits_needed(v, c.s, c.i) for v in self.values[:-1]]
        return tuple(inner + [c.n - sum(inner)])


def test_parse_and_properties():
    config = PoolConfig.parse("64, 5, 8, 4")
    assert config == PRESETS["64,5,8,4"]
    assert config.budget == 6
    assert config.config_count == 210
    assert config.config_bits == 8
    assert DEFAULT_CONFIG.config_bits == 16
    assert PRESETS["64,6,7,4"].config_count == 252
    assert PRESETS["64,6,7,4"].remainder == 2
    assert PRESETS["64,4,12,2"].config_count == 165
    with pytest.raises(ContractError):
        PoolConfig.parse("64,4")
    with pytest.raises(ContractError):
        PoolConfig.parse("64,10,8,1")


def test_offset_table_for_default_preset():
    table = get_offset_table(DEFAULT_CONFIG)
    assert len(table) == 47905
    assert table.word_bits == 32
    assert table.offsets[0] == (0, 64, 64, 64, 64)
    assert table.widths(0) == (64, 0, 0, 0)
    assert table.widths(47904) == (0, 0, 0, 64)
    for c in (0, 1, 12345, 46699, 47904):
        assert sum(table.widths(c)) == 64


@pytest.mark.parametrize("label", ["64,5,8,4", "64,6,7,4", "64,4,12,2"])
def test_offset_tables_for_presets(label):
    config = PRESETS[label]
    table = build_offset_table(config)
    assert len(table) == snb(config.budget, config.k) < 256
    for c in range(len(table)):
        widths = table.widths(c)
        assert sum(widths) == config.n
        assert all(w >= config.s for w in widths)
        assert all((w - config.s) % config.i == 0 for w in widths[:-1])


def test_offset_table_too_large():
    config = PoolConfig(n=64, k=8, s=0, i=1)
    assert config.config_count > 1 << 24
    with pytest.raises(TableTooLargeError):
        build_offset_table(config)


def test_packed_offsets_round_trip():
    table = build_offset_table(PRESETS["64,5,8,4"])
    unpacked = type(table).from_packed(table.config, table.packed())
    assert unpacked == table
    assert unpacked.multiples == table.multiples


def test_worked_increment_example():
    leftmost = 0x96964
    memory = (leftmost << 18) | (255 << 10) | 0x2C9
    pool = Pool(DEFAULT_CONFIG, memory=memory, config_number=46699)
    assert pool.counter_widths().parts == (10, 0, 8, 46)
    assert pool.read(2) == 255
    assert pool.increment(2, 1) is PoolUpdateOutcome.RESIZED
    assert pool.config_number == 46509
    assert pool.counter_widths().parts == (10, 0, 9, 45)
    assert pool.memory == 0x4B4B2402C9
    assert pool.values() == [0x2C9, 0, 256, leftmost]
    assert pool.free_bits() == 25


def test_fresh_pool():
    pool = Pool()
    assert pool.config_number == snb(64, 4) - 1
    assert pool.counter_widths().parts == (0, 0, 0, 64)
    assert pool.increment(0, 0) is PoolUpdateOutcome.IN_PLACE
    assert pool.values() == [0, 0, 0, 0]
    assert pool.free_bits() == 64


def test_increment_grows_and_fails_cleanly():
    pool = Pool()
    assert pool.increment(0, 1) is PoolUpdateOutcome.RESIZED
    assert pool.increment(1, (1 << 30) - 1) is PoolUpdateOutcome.RESIZED
    assert pool.increment(2, (1 << 30) - 1) is PoolUpdateOutcome.RESIZED
    assert pool.counter_widths().parts == (1, 30, 30, 3)
    before = (pool.memory, pool.config_number)
    assert pool.increment(0, 15) is PoolUpdateOutcome.POOL_FAILURE
    assert (pool.memory, pool.config_number) == before
    assert pool.increment(3, 7) is PoolUpdateOutcome.IN_PLACE
    assert pool.increment(3, 1) is PoolUpdateOutcome.POOL_FAILURE
    assert pool.free_bits() == 0


def test_negative_weight_returns_bits():
    pool = Pool()
    pool.increment(1, 1000)
    assert pool.counter_widths().parts == (0, 10, 0, 54)
    assert pool.increment(1, -1000) is PoolUpdateOutcome.RESIZED
    assert pool.counter_widths().parts == (0, 0, 0, 64)
    with pytest.raises(ContractError):
        pool.increment(1, -1)


def test_index_out_of_range():
    pool = Pool()
    with pytest.raises(ContractError):
        pool.read(4)
    with pytest.raises(ContractError):
        pool.increment(-1, 1)


@pytest.mark.parametrize("label", list(PRESETS))
def test_matches_reference_model(label):
    config = PRESETS[label]
    rng = random.Random(label)
    pool = Pool(config)
    model = ReferencePool(config)
    for _ in range(260_000):
        j = rng.randrange(config.k)
        roll = rng.random()
        if roll < 0.6:
            w = rng.randint(0, 3)
        elif roll < 0.85:
            w = rng.getrandbits(rng.randint(1, 24))
        else:
            w = -rng.randint(0, model.values[j])
        outcome = pool.increment(j, w)
        accepted = model.increment(j, w)
        assert (outcome is not PoolUpdateOutcome.POOL_FAILURE) == accepted
        assert pool.values() == model.values
        assert pool.counter_widths().parts == model.widths()


def test_pool_array_matches_single_pools():
    config = PRESETS["64,4,12,2"]
    array = PoolArray(3, config)
    pools = [Pool(config) for _ in range(3)]
    rng = random.Random(7)
    for _ in range(2000):
        index, j, w = rng.randrange(3), rng.randrange(4), rng.getrandbits(rng.randint(1, 12))
        assert array.increment(index, j, w) is pools[index].increment(j, w)
    for index, pool in enumerate(pools):
        assert array.values(index) == pool.values()
        assert array.counter_widths(index) == pool.counter_widths()
        assert array.counter_widths(index).budget == 64
        assert array.free_bits(index) == pool.free_bits()
    assert array.configs.dtype.itemsize == 1
    assert array.nbytes == 3 * (64 + 8) // 8
    array.reset(1)
    assert array.values(1) == [0, 0, 0, 0]


def test_separate_slack_layout_counts_more_configs():
    for config in PRESETS.values():
        assert separate_slack_config_count(config) == snb(config.budget, config.k + 1)
        assert separate_slack_config_count(config) > config.config_count


def test_separate_slack_fails_exactly_when_shared_layout_fails():
    config = PRESETS["64,5,8,4"]
    codec = get_codec(config)
    rng = random.Random(3)
    for _ in range(500):
        values = [rng.getrandbits(rng.randint(0, 20)) for _ in range(config.k)]
        multiples = [codec.canonical_multiple(v) for v in values]
        fits = sum(multiples) <= config.budget
        pool = Pool(config)
        outcomes = [pool.increment(j, v) for j, v in enumerate(values)]
        assert (PoolUpdateOutcome.POOL_FAILURE in outcomes) == (not fits)
        if fits:
            assert pool.values() == values
            inner = tuple(config.s + config.i * m for m in multiples[:-1])
            assert pool.counter_widths().parts[:-1] == inner
            c = separate_slack_encode(multiples, config)
            assert 0 <= c < separate_slack_config_count(config)
        else:
            with pytest.raises(ContractError):
                separate_slack_encode(multiples, config)
