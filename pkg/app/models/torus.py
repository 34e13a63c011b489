"""
トーラス上の格子・関数・生成作用素
TorusGrid は一様テンソル格子 θ_j = 2πj/m（重み 1/mⁿ）。
GeneratorSpec はファイバー上の生成作用素 L₀ = ½Σ_k(Σ_i ω_k^i ∂θ_i)² + Σ_i ω₀^i ∂θ_i の係数。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.models.errors import DimensionMismatchError, LabError, ResonanceError

ELLIPTICITY_TOL = 1e-12


@dataclass(frozen=True)
class TorusGrid:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 1:
            raise LabError(f"torus dimension must be >= 1, got {self.n}")
        if self.m < 2 or self.m & (self.m - 1):
            raise LabError(f"nodes per dimension must be a power of two >= 2, got {self.m}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.n

    @property
    def size(self) -> int:
        return self.m**self.n

    def axis(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.m) / self.m

    def angles(self) -> np.ndarray:
        """全節点の角度 (mⁿ, n)。並びは shape を C 順に平らにしたもの。"""
        mesh = np.meshgrid(*([self.axis()] * self.n), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def wavenumbers(self) -> np.ndarray:
        """FFT 配置の整数波数 (*shape, n)"""
        k = np.fft.fftfreq(self.m, d=1.0 / self.m)
        mesh = np.meshgrid(*([k] * self.n), indexing="ij")
        return np.stack(mesh, axis=-1)

    def nyquist_mask(self) -> np.ndarray:
        """いずれかの次元で |波数| = m/2 になる係数"""
        return np.any(np.abs(self.wavenumbers()) == self.m // 2, axis=-1)

    def high_band_mask(self) -> np.ndarray:
        """いずれかの次元で |波数| > 3m/8（解像帯域 0..m/2 の上位 1/4、ナイキストを含む）"""
        return np.any(8 * np.abs(self.wavenumbers()) > 3 * self.m, axis=-1)

    def average(self, values: np.ndarray) -> float:
        values = np.asarray(values)
        if values.size != self.size:
            raise DimensionMismatchError(f"expected {self.size} node values, got {values.size}")
        return float(np.mean(values))


@dataclass(frozen=True)
class TorusFunction:
    """ファイバー M_a 上の関数の節点値。level はそのファイバーの値 a、actions は作用 I。"""

    grid: TorusGrid
    values: np.ndarray
    level: np.ndarray | None = None
    actions: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.size != self.grid.size:
            raise DimensionMismatchError(
                f"torus function needs {self.grid.size} values, got {values.size}"
            )
        object.__setattr__(self, "values", values.reshape(self.grid.shape))

    @classmethod
    def sample(cls, grid: TorusGrid, fn: Callable[[np.ndarray], np.ndarray], **where) -> "TorusFunction":
        """角度 (mⁿ, n) を受け取る関数を格子上で評価する。"""
        return cls(grid=grid, values=np.asarray(fn(grid.angles())), **where)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.values)

    def mean(self) -> float:
        return float(np.real(np.mean(self.values)))

    def coefficients(self) -> np.ndarray:
        """f̂(m) = mⁿ 個の節点値の離散フーリエ係数（平均が f̂(0)）"""
        return np.fft.fftn(self.values) / self.grid.size

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def with_values(self, values: np.ndarray) -> "TorusFunction":
        return TorusFunction(grid=self.grid, values=values, level=self.level, actions=self.actions)


@dataclass(frozen=True)
class GeneratorSpec:
    freq: np.ndarray  # (n, n)、[k, i] = ω_k^i
    drift_freq: np.ndarray  # (n,)

    def __post_init__(self):
        freq = np.array(self.freq, dtype=float)
        drift = np.array(self.drift_freq, dtype=float)
        n = drift.size
        if freq.shape != (n, n):
            raise DimensionMismatchError(f"frequency matrix must be {n}x{n}, got {freq.shape}")
        # 楕円性：ω_k 行が張る行列が正則
        sv = np.linalg.svd(freq, compute_uv=False)
        if sv[-1] <= ELLIPTICITY_TOL * max(1.0, sv[0]):
            raise ResonanceError(
                "frequency matrix is singular; the fiber generator is not elliptic",
                freq=freq.tolist(),
            )
        object.__setattr__(self, "freq", freq)
        object.__setattr__(self, "drift_freq", drift)

    @classmethod
    def for_model(cls, model, actions: np.ndarray) -> "GeneratorSpec":
        actions = np.asarray(actions, dtype=float)
        return cls(freq=model.freq_matrix(actions), drift_freq=model.drift_freq(actions))

    @property
    def n(self) -> int:
        return self.drift_freq.size

    def symbol(self, grid: TorusGrid) -> np.ndarray:
        """λ(m) = −½Σ_k(m·ω_k)² + i(m·ω₀)。形状は grid.shape。"""
        if grid.n != self.n:
            raise DimensionMismatchError(f"grid dimension {grid.n} != generator dimension {self.n}")
        modes = grid.wavenumbers()
        rot = modes @ self.freq.T
        return -0.5 * np.sum(rot**2, axis=-1) + 1j * (modes @ self.drift_freq)
