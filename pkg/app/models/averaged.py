"""
一次スケーリング（時間 1/ε）の結果型
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from app.models.errors import DimensionMismatchError


def segment_exit(y0: np.ndarray, y1: np.ndarray, center: np.ndarray, radius: float) -> float | None:
    """
    線分 y0→y1 が球 ‖y − center‖ = radius を内から外へ横切る位置 s ∈ [0, 1]。
    y1 が球の内側なら None。
    """
    d = y1 - y0
    if np.linalg.norm(y1 - center) < radius:
        return None
    u = y0 - center
    A = float(d @ d)
    if A == 0.0:
        return 0.0
    B = float(2.0 * u @ d)
    C = float(u @ u - radius**2)
    disc = max(B * B - 4.0 * A * C, 0.0)
    s = (-B + np.sqrt(disc)) / (2.0 * A)
    return float(min(max(s, 0.0), 1.0))


@dataclass(frozen=True)
class AveragedODE:
    """d/dt H̄ = rhs(H̄)、H̄(0) = initial。center/radius はチャート球。"""

    rhs: Callable[[np.ndarray], np.ndarray]
    initial: np.ndarray
    center: np.ndarray
    radius: float

    def __post_init__(self):
        initial = np.array(self.initial, dtype=float)
        center = np.array(self.center, dtype=float)
        if initial.shape != center.shape:
            raise DimensionMismatchError(f"initial {initial.shape} and center {center.shape} differ")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "center", center)

    @property
    def n(self) -> int:
        return self.initial.size


@dataclass(frozen=True)
class AveragedPath:
    times: np.ndarray  # (S,)
    values: np.ndarray  # (S, n)
    exit_time: float  # チャート球から出なければ +inf

    @property
    def exited(self) -> bool:
        return bool(np.isfinite(self.exit_time))

    def at(self, t: np.ndarray | float) -> np.ndarray:
        """区分線形補間。終端（脱出時刻）より後は終端値で止める。"""
        t = np.asarray(t, dtype=float)
        clipped = np.clip(t, self.times[0], self.times[-1])
        out = np.stack(
            [np.interp(clipped, self.times, self.values[:, i]) for i in range(self.values.shape[1])],
            axis=-1,
        )
        return out

    def first_passage(self, center: np.ndarray, radius: float) -> float:
        """‖H̄(t) − center‖ ≥ radius となる最初の時刻（区分線形で評価）。なければ +inf。"""
        if np.linalg.norm(self.values[0] - center) >= radius:
            return float(self.times[0])
        for j in range(1, self.times.size):
            s = segment_exit(self.values[j - 1], self.values[j], center, radius)
            if s is not None:
                return float(self.times[j - 1] + s * (self.times[j] - self.times[j - 1]))
        return float("inf")


@dataclass(frozen=True)
class RateFitResult:
    epsilons: np.ndarray
    errors: np.ndarray  # (E sup‖H^ε − H̄‖^β)^(1/β)
    stderrs: np.ndarray
    n_paths: np.ndarray  # ε ごとの使用パス数
    beta: float
    slope: float
    intercept: float
    slope_ci: tuple[float, float]
    flags: list[str] = field(default_factory=list)
    averaged: AveragedPath | None = None  # 比較に使った H̄

    @property
    def fitted(self) -> bool:
        return bool(np.isfinite(self.slope))

    def within_band(self, lower: float = 0.25, upper: float = 1.2) -> bool:
        """傾きが [lower − CI 半幅, upper] に入るか"""
        if not self.fitted:
            return False
        half = 0.5 * (self.slope_ci[1] - self.slope_ci[0])
        if not np.isfinite(half):
            half = 0.0
        return lower - half <= self.slope <= upper


@dataclass(frozen=True)
class ExitProbabilityTable:
    epsilons: np.ndarray
    probabilities: np.ndarray  # P(T^ε < T_δ)
    stderrs: np.ndarray
    n_paths: int
    radius: float
    delta: float
    t_delta: float
    flags: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class DeviationTable:
    epsilons: np.ndarray  # (E,)
    times: np.ndarray  # (T,)
    means: np.ndarray  # (E, T) 平均 sup_{s≤t}‖H(y^ε_s) − H(x_s)‖
    stderrs: np.ndarray  # (E, T)
    n_paths: int
