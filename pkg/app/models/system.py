"""
可積分系と摂動の型
IntegrableModel は可積分族 {H_i}、作用・角度チャート、振動数行列、チャート領域 U₀ をまとめる。
U₀ はエネルギー空間の球 ‖H(x) − a₀‖ ≤ r。
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable

import numpy as np

from app.models.errors import ChartError, ConvergenceError, DimensionMismatchError
from app.models.phase import (
    ActionAngle,
    PhasePoint,
    ScalarFunction,
    SmoothField,
    as_coords,
    default_fd_step,
)

ChartMap = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
InverseChartMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class IntegrableModel:
    name: str
    n: int
    hamiltonians: tuple[ScalarFunction, ...]
    to_action_angle: ChartMap
    from_action_angle: InverseChartMap
    freq_matrix: Callable[[np.ndarray], np.ndarray]
    drift_freq: Callable[[np.ndarray], np.ndarray]
    chart_center: np.ndarray
    chart_radius: float
    drift: SmoothField | None = None
    action_angle_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    constant_frequencies: bool = False
    # ワーカープロセスで同じモデルを組み立て直すための記述（名前・パラメータ）
    spec: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.hamiltonians) != self.n:
            raise DimensionMismatchError(
                f"{self.name}: expected {self.n} Hamiltonians, got {len(self.hamiltonians)}"
            )
        center = np.array(self.chart_center, dtype=float)
        if center.shape != (self.n,):
            raise DimensionMismatchError(f"chart_center must have length {self.n}")
        if not self.chart_radius > 0:
            raise ChartError(f"chart_radius must be positive, got {self.chart_radius}")
        object.__setattr__(self, "chart_center", center)

    # --- エネルギー ---

    def energies(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        coords = as_coords(x, self.n)
        return np.stack([H(coords) for H in self.hamiltonians], axis=-1)

    def energy_of_actions(self, I: np.ndarray) -> np.ndarray:
        I = np.asarray(I, dtype=float)
        return self.energies(self.from_action_angle(I, np.zeros_like(I)))

    def actions_for_level(self, a: np.ndarray, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
        """H̃(I) = a を Newton 法で解く。ヤコビアンは freq_matrix（[k, i] = ∂H̃_k/∂I_i）。"""
        a = np.asarray(a, dtype=float)
        if a.shape != (self.n,):
            raise DimensionMismatchError(f"level must have length {self.n}, got {a.shape}")
        I = np.ones(self.n)
        for _ in range(max_iter):
            residual = self.energy_of_actions(I) - a
            step = np.linalg.solve(self.freq_matrix(I), residual)
            I = I - step
            if np.any(I <= 0):
                break
            if np.max(np.abs(step)) <= tol * max(1.0, np.max(np.abs(I))):
                break
        else:
            raise ConvergenceError(f"{self.name}: no action point found for level {a.tolist()}")
        if np.any(I <= 0):
            raise ChartError(f"{self.name}: level {a.tolist()} lies on or beyond the critical set")
        return I

    # --- チャート ---

    def action_angle(self, x: "PhasePoint | np.ndarray") -> ActionAngle:
        I, theta = self.to_action_angle(as_coords(x, self.n))
        return ActionAngle(I=I, theta=theta)

    def point(self, I, theta) -> PhasePoint:
        return PhasePoint(self.from_action_angle(np.asarray(I, float), np.asarray(theta, float)))

    def fiber_points(self, I: np.ndarray, angles: np.ndarray) -> np.ndarray:
        """作用 I のトーラス上の点列。angles は (N, n)、戻り値は (N, 2n)。"""
        I = np.broadcast_to(np.asarray(I, dtype=float), angles.shape)
        return self.from_action_angle(I, angles)

    def chart_distance(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(self.energies(x) - self.chart_center, axis=-1)

    def in_chart(self, x: np.ndarray) -> np.ndarray:
        return self.chart_distance(x) < self.chart_radius

    def require_in_chart(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        coords = as_coords(x, self.n)
        if not np.all(self.in_chart(coords)):
            raise ChartError(
                f"{self.name}: state outside chart ball (center={self.chart_center.tolist()}, "
                f"r={self.chart_radius})"
            )
        return coords

    def chart_velocity(self, x: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """ベクトル v の作用・角度成分 (dI(v), dθ(v))。"""
        x = as_coords(x, self.n)
        if self.action_angle_jacobian is not None:
            jac = self.action_angle_jacobian(x)
            comp = np.einsum("...ij,...j->...i", jac, v)
            return comp[..., : self.n], comp[..., self.n :]
        # 方向差分（角度は 2π の跳びを戻す）
        h = default_fd_step(x) / np.maximum(1.0, np.linalg.norm(v, axis=-1, keepdims=True))
        I_plus, th_plus = self.to_action_angle(x + h * v)
        I_minus, th_minus = self.to_action_angle(x - h * v)
        dth = np.angle(np.exp(1j * (th_plus - th_minus)))
        return (I_plus - I_minus) / (2.0 * h), dth / (2.0 * h)

    # --- 確率場 ---

    def noise_fields(self, x: np.ndarray) -> np.ndarray:
        """駆動場 X_{H_k}(x) = (∂H_k/∂p, −∂H_k/∂q) を (..., n, 2n) で返す。"""
        n = self.n
        fields = []
        for H in self.hamiltonians:
            g = H.grad(x)
            fields.append(np.concatenate([g[..., n:], -g[..., :n]], axis=-1))
        return np.stack(fields, axis=-2)

    def with_chart(self, center: np.ndarray | None = None, radius: float | None = None) -> "IntegrableModel":
        """チャート球を差し替える。spec も更新するのでワーカー側の再構築でも同じ球になる。"""
        changes: dict[str, Any] = {}
        spec = dict(self.spec)
        if center is not None:
            changes["chart_center"] = np.asarray(center, dtype=float)
            spec["center"] = changes["chart_center"].tolist()
        if radius is not None:
            changes["chart_radius"] = float(radius)
            spec["radius"] = float(radius)
        return replace(self, spec=spec, **changes)


@dataclass(frozen=True)
class Perturbation:
    """摂動ベクトル場 K。ハミルトン的なら K = X_k の k を保持する。"""

    name: str
    field: SmoothField
    hamiltonian_k: ScalarFunction | None = None
    # 記載どおりの成分で、局所ハミルトン性は検証していない摂動（K₂, K₃）
    unverified_hamiltonian: bool = False

    @property
    def n(self) -> int:
        return self.field.n

    @property
    def is_hamiltonian(self) -> bool:
        return self.hamiltonian_k is not None

    def inside(self, x: np.ndarray) -> np.ndarray:
        return self.field.inside(x)
