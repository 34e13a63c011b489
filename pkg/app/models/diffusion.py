"""
二次スケーリング（時間 1/ε²）の極限データ
DiffusionModel はレベル空間のテンソル格子上の節点値 (a_ij, σ, b_j) を持ち、
節点間は多重線形補間で評価する。格子の箱の外は DomainError。
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from app.models.errors import DimensionMismatchError, DomainError, LabError


@dataclass(frozen=True)
class DiffusionModel:
    axes: tuple[np.ndarray, ...]  # 各次元のレベル節点（狭義単調増加）
    a: np.ndarray  # (*shape, n, n) 対称化済み
    sigma: np.ndarray  # (*shape, n, n) 対称平方根
    b: np.ndarray  # (*shape, n)
    center: np.ndarray
    radius: float
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        axes = tuple(np.asarray(ax, dtype=float) for ax in self.axes)
        n = len(axes)
        shape = tuple(ax.size for ax in axes)
        for ax in axes:
            if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                raise LabError("each level axis needs >= 2 strictly increasing nodes")
        a = np.asarray(self.a, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.shape != shape + (n, n) or sigma.shape != shape + (n, n) or b.shape != shape + (n,):
            raise DimensionMismatchError(
                f"node arrays do not match the level grid {shape}: a={a.shape} sigma={sigma.shape} b={b.shape}"
            )
        for name, arr in (("a", a), ("sigma", sigma), ("b", b)):
            if not np.all(np.isfinite(arr)):
                raise LabError(f"diffusion field {name} has non-finite node values")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        interp = {
            name: RegularGridInterpolator(axes, arr, method="linear", bounds_error=False, fill_value=None)
            for name, arr in (("a", a), ("sigma", sigma), ("b", b))
        }
        object.__setattr__(self, "_interp", interp)

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(ax.size for ax in self.axes)

    @property
    def lower(self) -> np.ndarray:
        return np.array([ax[0] for ax in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([ax[-1] for ax in self.axes])

    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    def inside(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.all((z >= self.lower) & (z <= self.upper), axis=-1)

    def _eval(self, name: str, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.n:
            raise DimensionMismatchError(f"level points must have {self.n} components, got {z.shape}")
        if not np.all(self.inside(z)):
            raise DomainError(f"{name}_field evaluated outside the level grid box")
        return self._interp[name](z)

    def a_field(self, z: np.ndarray) -> np.ndarray:
        return self._eval("a", z)

    def sigma_field(self, z: np.ndarray) -> np.ndarray:
        return self._eval("sigma", z)

    def b_field(self, z: np.ndarray) -> np.ndarray:
        return self._eval("b", z)

    def to_dict(self) -> dict[str, Any]:
        nodes = self.nodes()
        flat_a = self.a.reshape(-1, self.n, self.n)
        flat_s = self.sigma.reshape(-1, self.n, self.n)
        flat_b = self.b.reshape(-1, self.n)
        return {
            "n": self.n,
            "axes": [ax.tolist() for ax in self.axes],
            "center": self.center.tolist(),
            "radius": float(self.radius),
            "metadata": self.metadata,
            "nodes": [
                {
                    "level": nodes[j].tolist(),
                    "a": flat_a[j].ravel().tolist(),
                    "sigma": flat_s[j].ravel().tolist(),
                    "b": flat_b[j].tolist(),
                }
                for j in range(nodes.shape[0])
            ],
        }

    def to_json(self) -> str:
        # json は float を repr（最短往復表現）で書くので精度は落ちない
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "DiffusionModel":
        axes = tuple(np.asarray(ax, dtype=float) for ax in doc["axes"])
        n = len(axes)
        shape = tuple(ax.size for ax in axes)
        nodes = doc["nodes"]
        a = np.array([nd["a"] for nd in nodes], dtype=float).reshape(shape + (n, n))
        sigma = np.array([nd["sigma"] for nd in nodes], dtype=float).reshape(shape + (n, n))
        b = np.array([nd["b"] for nd in nodes], dtype=float).reshape(shape + (n,))
        return cls(
            axes=axes, a=a, sigma=sigma, b=b,
            center=np.asarray(doc["center"], dtype=float),
            radius=float(doc["radius"]),
            metadata=dict(doc.get("metadata", {})),
        )


@dataclass(frozen=True)
class WeakConvergenceResult:
    """ε ごとの H(y^ε_{t/ε²}) と極限 SDE の z_t の比較表（行は dict）"""

    epsilons: np.ndarray
    t: float
    reading: str
    moments: list[dict[str, float]]
    covariances: list[dict[str, float]]
    comparison: list[dict[str, float]]
    exit_fractions: dict[float, float]
    flags: list[str] = field(default_factory=list)
    diffusion: DiffusionModel | None = None

    def cdf_distances(self, component: int) -> np.ndarray:
        """ε の並び順の経験分布関数距離"""
        rows = [r for r in self.moments if r["epsilon"] > 0 and r["component"] == component]
        by_eps = {r["epsilon"]: r["cdf_distance"] for r in rows}
        return np.array([by_eps[float(e)] for e in self.epsilons])
