"""共通フィクスチャ"""
import numpy as np
import pytest

from app.models.torus import TorusGrid
from app.services.model_library import build_1dof_case, build_r4_example

SEED = 20240611


@pytest.fixture
def r4():
    """R⁴ 例。I₀ = (2, 2) なので a₀ = (4, 2)、r = 1/√2。"""
    model, perts = build_r4_example(actions=(2.0, 2.0))
    return model, perts


@pytest.fixture
def r4_model(r4):
    return r4[0]


@pytest.fixture
def k1(r4):
    return r4[1][0]


@pytest.fixture
def one_dof():
    """H = ½(q²+p²)、k = q。I₀ = 15 なので a₀ = 15、r = 7.5。"""
    return build_1dof_case(actions=(15.0,))


@pytest.fixture
def grid16():
    return TorusGrid(n=1, m=16)


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)
