"""
トーラス上のポアソン方程式のテスト
"""
import numpy as np
import pytest

from app.models.errors import BandLimitError, NotCenteredError, ResonanceError
from app.models.torus import GeneratorSpec, TorusFunction, TorusGrid
from app.services.noise import CHANNEL_CHECK, SeedDescriptor
from app.services.poisson import apply_generator, random_band_limited, solve_poisson, spectral_gradient

UNIT = GeneratorSpec(freq=np.eye(1), drift_freq=np.zeros(1))
R4_GEN = GeneratorSpec(freq=np.array([[1.0, 1.0], [0.0, 1.0]]), drift_freq=np.zeros(2))


def test_cos_solution():
    """½∂²h = cos θ の解は −2cos θ"""
    grid = TorusGrid(n=1, m=64)
    f = TorusFunction.sample(grid, lambda th: np.cos(th[:, 0]))
    h = solve_poisson(f, UNIT)
    np.testing.assert_allclose(h.values, -2.0 * f.values, atol=1e-12)


@pytest.mark.parametrize("n, gen", [(1, UNIT), (2, R4_GEN)])
def test_roundtrip_random_band_limited(n, gen):
    grid = TorusGrid(n=n, m=32)
    for k in range(20):
        f = random_band_limited(grid, SeedDescriptor(7, k, CHANNEL_CHECK).generator())
        back = apply_generator(solve_poisson(f, gen), gen)
        assert np.max(np.abs(back.values - f.values)) <= 1e-8


def test_roundtrip_with_drift_frequency():
    gen = GeneratorSpec(freq=np.array([[1.0, 1.0], [0.0, 1.0]]), drift_freq=np.array([0.3, -0.7]))
    grid = TorusGrid(n=2, m=16)
    f = random_band_limited(grid, np.random.default_rng(3))
    h = solve_poisson(f, gen)
    assert not np.iscomplexobj(h.values)
    np.testing.assert_allclose(apply_generator(h, gen).values, f.values, atol=1e-8)


def test_zero_mode_sets_mean():
    grid = TorusGrid(n=1, m=16)
    f = TorusFunction.sample(grid, lambda th: np.sin(2 * th[:, 0]))
    h = solve_poisson(f, UNIT, zero_mode=3.0)
    assert h.mean() == pytest.approx(3.0)
    np.testing.assert_allclose(h.values - 3.0, solve_poisson(f, UNIT).values, atol=1e-12)


def test_not_centered():
    grid = TorusGrid(n=1, m=16)
    f = TorusFunction.sample(grid, lambda th: 1.0 + np.cos(th[:, 0]))
    with pytest.raises(NotCenteredError):
        solve_poisson(f, UNIT)


def test_band_limit():
    grid = TorusGrid(n=1, m=8)
    f = TorusFunction.sample(grid, lambda th: np.cos(4 * th[:, 0]))
    with pytest.raises(BandLimitError):
        solve_poisson(f, UNIT)


def test_singular_frequencies_are_resonant():
    with pytest.raises(ResonanceError):
        GeneratorSpec(freq=np.array([[1.0, 1.0], [1.0, 1.0]]), drift_freq=np.zeros(2))


def test_spectral_gradient():
    grid = TorusGrid(n=2, m=16)
    h = TorusFunction.sample(grid, lambda th: np.sin(th[:, 0]) * np.cos(2 * th[:, 1]))
    grad = spectral_gradient(h).reshape(2, -1)
    th = grid.angles()
    np.testing.assert_allclose(grad[0], np.cos(th[:, 0]) * np.cos(2 * th[:, 1]), atol=1e-12)
    np.testing.assert_allclose(grad[1], -2.0 * np.sin(th[:, 0]) * np.sin(2 * th[:, 1]), atol=1e-12)


def test_linearity():
    grid = TorusGrid(n=2, m=16)
    f = random_band_limited(grid, SeedDescriptor(11, 0, CHANNEL_CHECK).generator())
    g = random_band_limited(grid, SeedDescriptor(11, 1, CHANNEL_CHECK).generator())
    combined = f.with_values(2.5 * f.values - 0.75 * g.values)
    expected = 2.5 * solve_poisson(f, R4_GEN).values - 0.75 * solve_poisson(g, R4_GEN).values
    np.testing.assert_allclose(solve_poisson(combined, R4_GEN).values, expected, atol=1e-12)


def test_solution_is_centered():
    grid = TorusGrid(n=2, m=16)
    f = random_band_limited(grid, np.random.default_rng(5))
    assert abs(solve_poisson(f, R4_GEN).mean()) <= 1e-12


def test_one_dof_momentum(one_dof):
    """f = −p = −√(2I) sin θ なら h = 2p"""
    model, _ = one_dof
    grid = TorusGrid(n=1, m=32)
    actions = np.array([15.0])
    points = model.fiber_points(actions, grid.angles())
    f = TorusFunction(grid=grid, values=-points[:, 1], actions=actions)
    h = solve_poisson(f, GeneratorSpec.for_model(model, actions))
    np.testing.assert_allclose(h.flat(), 2.0 * points[:, 1], atol=1e-12)


def test_top_quarter_band_rejected():
    """ナイキスト線が空でも 3m/8 を超えるモードは解像不足として拒否する"""
    grid = TorusGrid(n=1, m=16)
    f = TorusFunction.sample(grid, lambda th: np.cos(7 * th[:, 0]))
    with pytest.raises(BandLimitError):
        solve_poisson(f, UNIT)


def test_resolved_band_accepted():
    grid = TorusGrid(n=1, m=16)
    f = TorusFunction.sample(grid, lambda th: np.cos(6 * th[:, 0]))
    np.testing.assert_allclose(solve_poisson(f, UNIT).values, -f.values / 18.0, atol=1e-12)
