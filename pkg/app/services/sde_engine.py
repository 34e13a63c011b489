"""
SDE エンジン
非摂動系 dx = Σ X_{H_k}(x)∘dB^k + V dt と摂動系（+ εK dt）をストラトノビッチ積分する。
- heun: 予測子に Euler、修正子で両端の場を平均
- midpoint: 陰的中点則（パスごとに不動点反復）。二次の第一積分を厳密に保存する
パスはバッチ（行）単位でベクトル化し、各行の計算はその行の状態と乱数列だけに依存する。
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from app.config import settings
from app.models.errors import ChartError, ConvergenceError, ExperimentError, LabError, NonFiniteError
from app.models.phase import PhasePoint, as_coords
from app.models.system import IntegrableModel, Perturbation
from app.models.trajectory import EnsembleRecord, TrajectoryRecord
from app.services.noise import CHANNEL_SYSTEM, BlockSource, NoiseBank, NoisePath

logger = logging.getLogger(__name__)

Scheme = Literal["heun", "midpoint"]
SCHEMES = ("heun", "midpoint")

MIDPOINT_TOL = 1e-12
MIDPOINT_MAX_ITER = 60


def steps_for(horizon: float, dt: float) -> int:
    """horizon が dt の整数倍であることを確かめてステップ数を返す。"""
    if horizon < 0 or not dt > 0:
        raise LabError(f"invalid horizon/dt: horizon={horizon} dt={dt}")
    n = int(round(horizon / dt))
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise LabError(f"horizon {horizon} is not a multiple of dt {dt}")
    return n


def fit_steps(horizon: float, dt_max: float) -> tuple[int, float]:
    """dt ≤ dt_max で horizon をちょうど割り切る (n_steps, dt)。"""
    n = max(1, math.ceil(horizon / dt_max - 1e-9))
    return n, horizon / n


def policy_dt(epsilon: float, dt_max: float, scale: float, power: int = 2) -> float:
    """dt = min(dt_max, scale·ε^power)。離散化誤差を平均化誤差より小さく保つ。"""
    if epsilon <= 0:
        return dt_max
    return min(dt_max, scale * epsilon**power)


class _Stepper:
    def __init__(self, model: IntegrableModel, pert: Perturbation | None, epsilon: float, scheme: Scheme):
        if scheme not in SCHEMES:
            raise LabError(f"unknown scheme {scheme!r}; use one of {SCHEMES}")
        self.model = model
        self.pert = pert if (pert is not None and epsilon != 0.0) else None
        self.epsilon = float(epsilon)
        self.scheme = scheme

    def increment(self, y: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
        """Σ_k X_k(y) ΔB_k + (V(y) + εK(y)) dt"""
        X = self.model.noise_fields(y)
        out = X[:, 0, :] * dB[:, 0:1]
        for k in range(1, self.model.n):
            out = out + X[:, k, :] * dB[:, k : k + 1]
        if self.model.drift is not None:
            out = out + self.model.drift(y) * dt
        if self.pert is not None:
            out = out + (self.epsilon * dt) * self.pert.field(y)
        return out

    def step(self, y: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
        if self.scheme == "heun":
            f0 = self.increment(y, dB, dt)
            return y + 0.5 * (f0 + self.increment(y + f0, dB, dt))
        return self._midpoint(y, dB, dt)

    def _midpoint(self, y: np.ndarray, dB: np.ndarray, dt: float) -> np.ndarray:
        y1 = y + self.increment(y, dB, dt)
        active = np.ones(y.shape[0], dtype=bool)
        for _ in range(MIDPOINT_MAX_ITER):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                return y1
            mid = 0.5 * (y[idx] + y1[idx])
            new = y[idx] + self.increment(mid, dB[idx], dt)
            change = np.max(np.abs(new - y1[idx]), axis=-1)
            y1[idx] = new
            done = change <= MIDPOINT_TOL * (1.0 + np.max(np.abs(new), axis=-1))
            active[idx[done]] = False
        if active.any():
            raise ConvergenceError(
                f"implicit midpoint step did not converge for {int(active.sum())} paths; reduce dt"
            )
        return y1


def _record_steps(n_steps: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise LabError(f"record_stride must be >= 1, got {stride}")
    steps = list(range(0, n_steps + 1, stride))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.asarray(steps)


def simulate(
    model: IntegrableModel,
    pert: Perturbation | None,
    epsilon: float,
    y0: np.ndarray,
    dt: float,
    n_steps: int,
    source: BlockSource,
    *,
    record_stride: int = 1,
    scheme: Scheme = "heun",
    keep_states: bool = False,
    paths: Sequence[int] | None = None,
    block_steps: int | None = None,
) -> EnsembleRecord:
    """
    y0 (P, 2n) から n_steps ステップ積分する共通ループ。
    ‖H(y) − a₀‖ ≥ r となったステップで脱出とし、その行は以後その状態で止める。
    """
    if epsilon < 0:
        raise LabError(f"epsilon must be >= 0, got {epsilon}")
    y = np.array(as_coords(y0, model.n), dtype=float, ndmin=2)
    P = y.shape[0]
    if source.n_paths != P or source.n_streams != model.n:
        raise LabError(
            f"noise source ({source.n_paths} paths, {source.n_streams} streams) does not match "
            f"{P} paths of a {model.n}-stream model"
        )
    model.require_in_chart(y)
    if pert is not None and epsilon != 0.0 and not np.all(pert.inside(y)):
        raise ChartError(f"initial state outside the domain of {pert.name}")

    stepper = _Stepper(model, pert, epsilon, scheme)
    block_steps = block_steps or settings.NOISE_BLOCK_STEPS
    rec_steps = _record_steps(n_steps, record_stride)
    S = rec_steps.size
    center, radius = model.chart_center, model.chart_radius

    energies = np.empty((P, S, model.n))
    states = np.empty((P, S, 2 * model.n)) if keep_states else None
    energies[:, 0] = model.energies(y)
    if states is not None:
        states[:, 0] = y
    exit_times = np.full(P, np.inf)
    exit_states = y.copy()
    active = np.ones(P, dtype=bool)
    next_rec = 1
    done_steps = 0

    while done_steps < n_steps and active.any():
        k = min(block_steps, n_steps - done_steps)
        block = source.draw(k)
        for j in range(k):
            idx = np.flatnonzero(active)
            if idx.size:
                y_new = stepper.step(y[idx], block[idx, j], dt)
                if not np.all(np.isfinite(y_new)):
                    raise NonFiniteError(f"non-finite state at step {done_steps + j + 1}")
                y[idx] = y_new
                dist = np.linalg.norm(model.energies(y_new) - center, axis=-1)
                out = dist >= radius
                if out.any():
                    rows = idx[out]
                    exit_times[rows] = (done_steps + j + 1) * dt
                    exit_states[rows] = y[rows]
                    active[rows] = False
            s = done_steps + j + 1
            if next_rec < S and s == rec_steps[next_rec]:
                energies[:, next_rec] = model.energies(y)
                if states is not None:
                    states[:, next_rec] = y
                next_rec += 1
        done_steps += k
        logger.debug("simulate progress: step=%d/%d active=%d", done_steps, n_steps, int(active.sum()))

    if next_rec < S:
        # 全パス脱出で打ち切ったときは停止値で埋める
        energies[:, next_rec:] = model.energies(y)[:, None, :]
        if states is not None:
            states[:, next_rec:] = y[:, None, :]
    exit_states[active] = y[active]

    return EnsembleRecord(
        times=rec_steps * dt,
        energies=energies,
        exit_times=exit_times,
        exit_states=exit_states,
        exit_energies=model.energies(exit_states),
        final_states=y,
        epsilon=float(epsilon),
        dt=float(dt),
        paths=np.arange(P) if paths is None else np.asarray(paths),
        states=states,
    )


def integrate(
    model: IntegrableModel,
    pert: Perturbation | None,
    epsilon: float,
    y0: "PhasePoint | np.ndarray",
    horizon: float,
    noise: NoisePath,
    record_stride: int = 1,
    *,
    scheme: Scheme = "heun",
) -> TrajectoryRecord:
    """1 本の軌道を与えられた NoisePath で積分する。"""
    n_steps = steps_for(horizon, noise.dt)
    if n_steps > noise.n_steps:
        raise LabError(f"noise path has {noise.n_steps} steps, horizon needs {n_steps}")
    record = simulate(
        model,
        pert,
        epsilon,
        as_coords(y0, model.n)[None, :],
        noise.dt,
        n_steps,
        noise.block_source(),
        record_stride=record_stride,
        scheme=scheme,
        keep_states=True,
    )
    return record.trajectory(0)


def integrate_coupled(
    model: IntegrableModel,
    pert: Perturbation | None,
    epsilon: float,
    y0: "PhasePoint | np.ndarray",
    horizon: float,
    noise: NoisePath,
    record_stride: int = 1,
    *,
    scheme: Scheme = "heun",
) -> tuple[TrajectoryRecord, TrajectoryRecord]:
    """同じブラウン経路で (y^ε, x = y⁰) を返す。"""
    perturbed = integrate(model, pert, epsilon, y0, horizon, noise, record_stride, scheme=scheme)
    unperturbed = integrate(model, pert, 0.0, y0, horizon, noise, record_stride, scheme=scheme)
    return perturbed, unperturbed


def exact_rotation_sample(
    model: IntegrableModel, y0: "PhasePoint | np.ndarray", t: float, noise: NoisePath
) -> PhasePoint:
    """
    振動数一定のモデル（R⁴ 例を含む調和振動子族）の ε = 0 厳密解。
    作用は保存され、θ_t = θ₀ − Mᵀ B_t + ω₀ t。
    """
    if not model.constant_frequencies:
        raise LabError(f"exact rotation sampler needs constant frequencies; {model.name} has none")
    coords = as_coords(y0, model.n)
    B = noise.brownian(steps_for(t, noise.dt))
    I, theta = model.to_action_angle(coords)
    M = model.freq_matrix(I)
    theta_t = theta - M.T @ B + model.drift_freq(I) * t
    return PhasePoint(model.from_action_angle(I, np.mod(theta_t, 2.0 * np.pi)))


# --- アンサンブル ---


@dataclass(frozen=True)
class EnsembleRequest:
    """アンサンブル 1 回分の依頼。モデルを含まないのでワーカーへそのまま渡せる。"""

    epsilon: float
    y0: tuple[float, ...]
    horizon: float
    dt: float
    n_paths: int
    master_seed: int
    record_stride: int = 1
    scheme: str = "midpoint"
    channel: int = CHANNEL_SYSTEM
    first_path: int = 0
    keep_states: bool = False
    n_steps: int = field(init=False)

    def __post_init__(self):
        if self.n_paths < 1:
            raise ExperimentError(f"n_paths must be >= 1, got {self.n_paths}")
        object.__setattr__(self, "n_steps", steps_for(self.horizon, self.dt))

    def path_batches(self, batch_size: int) -> list[range]:
        stop = self.first_path + self.n_paths
        return [range(s, min(s + batch_size, stop)) for s in range(self.first_path, stop, batch_size)]


EnsembleRunner = Callable[[EnsembleRequest], EnsembleRecord]
# (model, pert) からランナーを作るもの。LocalEnsembleRunner 自身もこの形
RunnerFactory = Callable[[IntegrableModel, "Perturbation | None"], EnsembleRunner]


def run_request_batch(
    model: IntegrableModel, pert: Perturbation | None, request: EnsembleRequest, paths: range
) -> EnsembleRecord:
    bank = NoiseBank.for_paths(request.master_seed, paths, model.n, request.dt, request.channel)
    y0 = np.tile(np.asarray(request.y0, dtype=float), (len(paths), 1))
    return simulate(
        model,
        pert,
        request.epsilon,
        y0,
        request.dt,
        request.n_steps,
        bank,
        record_stride=request.record_stride,
        scheme=request.scheme,  # type: ignore[arg-type]
        keep_states=request.keep_states,
        paths=list(paths),
    )


class LocalEnsembleRunner:
    """同一プロセスでバッチを順に処理するランナー"""

    def __init__(self, model: IntegrableModel, pert: Perturbation | None, batch_size: int | None = None):
        self.model = model
        self.pert = pert
        self.batch_size = batch_size or settings.BATCH_SIZE

    def __call__(self, request: EnsembleRequest) -> EnsembleRecord:
        parts = [
            run_request_batch(self.model, self.pert, request, paths)
            for paths in request.path_batches(self.batch_size)
        ]
        return EnsembleRecord.concatenate(parts)


def integrate_ensemble(
    model: IntegrableModel,
    pert: Perturbation | None,
    epsilon: float,
    y0: "PhasePoint | np.ndarray",
    horizon: float,
    dt: float,
    n_paths: int,
    master_seed: int,
    *,
    record_stride: int = 1,
    scheme: Scheme = "heun",
    keep_states: bool = False,
    runner: EnsembleRunner | None = None,
) -> EnsembleRecord:
    request = EnsembleRequest(
        epsilon=float(epsilon),
        y0=tuple(as_coords(y0, model.n).tolist()),
        horizon=float(horizon),
        dt=float(dt),
        n_paths=n_paths,
        master_seed=master_seed,
        record_stride=record_stride,
        scheme=scheme,
        keep_states=keep_states,
    )
    return (runner or LocalEnsembleRunner(model, pert))(request)
