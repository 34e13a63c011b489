"""
位相空間の基本型
PhasePoint（正準座標 (q, p) の点）、ScalarFunction（ハミルトニアン・観測量）、
SmoothField（ベクトル場）を定義する。評価はすべて (..., 2n) 配列でベクトル化されている。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.models.errors import DimensionMismatchError, DomainError, NonFiniteError

ArrayFn = Callable[[np.ndarray], np.ndarray]
DomainFn = Callable[[np.ndarray], np.ndarray]

_FD_BASE = np.finfo(float).eps ** (1.0 / 3.0)


def as_coords(x: "PhasePoint | np.ndarray", n: int) -> np.ndarray:
    """PhasePoint / 配列を (..., 2n) の float 配列にそろえる。"""
    coords = x.coords if isinstance(x, PhasePoint) else np.asarray(x, dtype=float)
    if coords.ndim == 0 or coords.shape[-1] != 2 * n:
        raise DimensionMismatchError(
            f"expected last axis of length {2 * n}, got shape {coords.shape}",
            expected=2 * n,
        )
    return coords


def default_fd_step(x: np.ndarray) -> np.ndarray:
    """中心差分の刻み h = eps^(1/3)·max(1, |x|)。形状は (..., 1)。"""
    scale = np.maximum(1.0, np.linalg.norm(x, axis=-1, keepdims=True))
    return _FD_BASE * scale


def central_gradient(fn: ArrayFn, x: np.ndarray, h_fd: float | None = None) -> np.ndarray:
    """スカラー関数の勾配を中心差分で求める。戻り値は (..., 2n)。"""
    h = default_fd_step(x) if h_fd is None else np.full(x.shape[:-1] + (1,), h_fd)
    grad = np.empty_like(x)
    for j in range(x.shape[-1]):
        step = np.zeros_like(x)
        step[..., j] = h[..., 0]
        grad[..., j] = (fn(x + step) - fn(x - step)) / (2.0 * h[..., 0])
    return grad


def central_jacobian(fn: ArrayFn, x: np.ndarray, h_fd: float | None = None) -> np.ndarray:
    """ベクトル場のヤコビアン (..., 2n, 2n) を中心差分で求める。[..., i, j] = ∂F_i/∂x_j"""
    h = default_fd_step(x) if h_fd is None else np.full(x.shape[:-1] + (1,), h_fd)
    dim = x.shape[-1]
    jac = np.empty(x.shape[:-1] + (dim, dim))
    for j in range(dim):
        step = np.zeros_like(x)
        step[..., j] = h[..., 0]
        jac[..., :, j] = (fn(x + step) - fn(x - step)) / (2.0 * h[..., :])
    return jac


@dataclass(frozen=True)
class PhasePoint:
    """正準座標 (q_1..q_n, p_1..p_n) の状態"""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        if coords.ndim != 1 or coords.size < 2 or coords.size % 2 != 0:
            raise DimensionMismatchError(
                f"PhasePoint needs an even-length vector (2n, n>=1), got shape {coords.shape}"
            )
        if not np.all(np.isfinite(coords)):
            raise NonFiniteError("PhasePoint に NaN/inf が含まれています", coords=coords.tolist())
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n(self) -> int:
        return self.coords.size // 2

    @property
    def q(self) -> np.ndarray:
        return self.coords[: self.n]

    @property
    def p(self) -> np.ndarray:
        return self.coords[self.n :]

    @classmethod
    def from_qp(cls, q, p) -> "PhasePoint":
        return cls(np.concatenate([np.atleast_1d(q), np.atleast_1d(p)]).astype(float))


def _check_domain(domain: DomainFn | None, x: np.ndarray, name: str) -> None:
    if domain is None:
        return
    inside = np.asarray(domain(x), dtype=bool)
    if not np.all(inside):
        bad = np.argwhere(~np.atleast_1d(inside)).ravel()[:5].tolist()
        raise DomainError(f"{name or 'function'} evaluated outside its domain", rows=bad)


@dataclass(frozen=True)
class ScalarFunction:
    """R^(2n) 上のスカラー関数。gradient 未指定なら中心差分で補う。"""

    n: int
    evaluator: ArrayFn
    gradient: ArrayFn | None = None
    domain: DomainFn | None = None
    name: str = ""
    h_fd: float | None = None

    def __call__(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        coords = as_coords(x, self.n)
        _check_domain(self.domain, coords, self.name)
        return np.asarray(self.evaluator(coords), dtype=float)

    def grad(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        coords = as_coords(x, self.n)
        _check_domain(self.domain, coords, self.name)
        if self.gradient is not None:
            g = np.asarray(self.gradient(coords), dtype=float)
        else:
            g = central_gradient(self.evaluator, coords, self.h_fd)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient of {self.name or 'function'}")
        return g

    def fd_grad(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        """closed-form の有無にかかわらず中心差分で勾配を返す（整合性チェック用）"""
        return central_gradient(self.evaluator, as_coords(x, self.n), self.h_fd)


@dataclass(frozen=True)
class SmoothField:
    """R^(2n) 上のベクトル場。evaluator は (..., 2n) -> (..., 2n)。"""

    n: int
    evaluator: ArrayFn
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    domain: DomainFn | None = None
    name: str = ""
    h_fd: float | None = None

    def __call__(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        coords = as_coords(x, self.n)
        _check_domain(self.domain, coords, self.name)
        values = np.asarray(self.evaluator(coords), dtype=float)
        if values.shape != coords.shape:
            raise DimensionMismatchError(
                f"field {self.name} returned shape {values.shape} for input {coords.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(f"non-finite value of field {self.name or 'field'}")
        return values

    def derivative(self, x: "PhasePoint | np.ndarray") -> np.ndarray:
        coords = as_coords(x, self.n)
        _check_domain(self.domain, coords, self.name)
        if self.jacobian is not None:
            return np.asarray(self.jacobian(coords), dtype=float)
        return central_jacobian(self.evaluator, coords, self.h_fd)

    def inside(self, x: np.ndarray) -> np.ndarray:
        if self.domain is None:
            return np.ones(np.shape(x)[:-1], dtype=bool)
        return np.asarray(self.domain(x), dtype=bool)


def zero_field(n: int) -> SmoothField:
    return SmoothField(n=n, evaluator=np.zeros_like, name="zero")


@dataclass(frozen=True)
class ActionAngle:
    """作用・角度座標 (I, θ)。θ は [0, 2π) に還元済み。"""

    I: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        I = np.array(self.I, dtype=float)
        theta = np.mod(np.array(self.theta, dtype=float), 2.0 * np.pi)
        if I.shape != theta.shape:
            raise DimensionMismatchError(f"I {I.shape} and theta {theta.shape} differ")
        object.__setattr__(self, "I", I)
        object.__setattr__(self, "theta", theta)
