"""
乱数（ブラウン増分）のテスト
"""
import numpy as np
import pytest

from app.models.errors import LabError
from app.services.noise import CHANNEL_LIMIT, CHANNEL_SYSTEM, NoiseBank, NoisePath, SeedDescriptor


def test_same_descriptor_same_stream():
    a = NoisePath.generate(SeedDescriptor(7, 3), 100, 2, 1e-3)
    b = NoisePath.generate(SeedDescriptor(7, 3), 100, 2, 1e-3)
    np.testing.assert_array_equal(a.increments, b.increments)


def test_channels_and_streams_are_distinct():
    base = NoisePath.generate(SeedDescriptor(7, 3, CHANNEL_SYSTEM), 50, 1, 1e-3).increments
    other_channel = NoisePath.generate(SeedDescriptor(7, 3, CHANNEL_LIMIT), 50, 1, 1e-3).increments
    other_stream = NoisePath.generate(SeedDescriptor(7, 4, CHANNEL_SYSTEM), 50, 1, 1e-3).increments
    assert not np.array_equal(base, other_channel)
    assert not np.array_equal(base, other_stream)


def test_bank_rows_match_single_paths_in_blocks():
    dt = 1e-2
    bank = NoiseBank.for_paths(11, range(5, 9), 2, dt)
    drawn = np.concatenate([bank.draw(7), bank.draw(13)], axis=1)
    for row, stream in enumerate(range(5, 9)):
        single = NoisePath.generate(SeedDescriptor(11, stream), 20, 2, dt)
        np.testing.assert_array_equal(drawn[row], single.increments)


def test_increment_variance():
    dt = 1e-3
    inc = NoisePath.generate(SeedDescriptor(1, 0), 200_000, 1, dt).increments
    assert np.var(inc) == pytest.approx(dt, rel=0.02)


def test_coarsen_keeps_brownian_path():
    fine = NoisePath.generate(SeedDescriptor(2, 0), 64, 2, 1e-3)
    coarse = fine.coarsen(4)
    assert coarse.dt == pytest.approx(4e-3)
    assert coarse.n_steps == 16
    np.testing.assert_allclose(coarse.brownian(16), fine.brownian(64))
    np.testing.assert_allclose(coarse.brownian(5), fine.brownian(20))


def test_coarsen_requires_divisor():
    with pytest.raises(LabError):
        NoisePath.zeros(10, 1, 1e-3).coarsen(3)


def test_block_source_exhaustion():
    source = NoisePath.zeros(5, 1, 1e-3).block_source()
    source.draw(5)
    with pytest.raises(LabError):
        source.draw(1)
