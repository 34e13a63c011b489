"""
平均化エンジン（時間 1/ε の一次スケーリング）
- torus_average: ファイバー M_a 上の一様測度での平均 Q^g(a)
- averaged_rhs / solve_averaged_ode: 平均化 ODE d/dt H̄_i = ∫ω(X_{H_i}, K)dμ とチャート脱出時刻 T⁰
- rate_experiment / exit_probability_experiment / deviation_experiment: モンテカルロ実験
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from app.config import settings
from app.models.averaged import (
    AveragedODE,
    AveragedPath,
    DeviationTable,
    ExitProbabilityTable,
    RateFitResult,
    segment_exit,
)
from app.models.errors import DomainError, ExperimentError, LabError
from app.models.phase import PhasePoint, as_coords
from app.models.system import IntegrableModel, Perturbation
from app.models.torus import TorusGrid
from app.services.sde_engine import (
    LocalEnsembleRunner,
    RunnerFactory,
    fit_steps,
    integrate_ensemble,
    policy_dt,
)
from app.services.symplectic import omega_pairing

logger = logging.getLogger(__name__)

MIN_RATE_PATHS = 100


def check_epsilons(epsilons: Sequence[float]) -> np.ndarray:
    eps = np.asarray(epsilons, dtype=float)
    if eps.ndim != 1 or eps.size == 0 or np.any(eps <= 0):
        raise ExperimentError(f"epsilon grid must be positive numbers, got {list(epsilons)}")
    if np.any(np.diff(eps) >= 0):
        raise ExperimentError(f"epsilon grid must be strictly decreasing, got {eps.tolist()}")
    return eps


def default_grid(model: IntegrableModel, m: int | None = None) -> TorusGrid:
    return TorusGrid(n=model.n, m=m or settings.TORUS_GRID_SIZE)


# --- トーラス平均 ---


def fiber_sample(model: IntegrableModel, level: np.ndarray, grid: TorusGrid) -> tuple[np.ndarray, np.ndarray]:
    """レベル a のファイバー上の格子点。戻り値は (作用 I, 点 (mⁿ, 2n))。"""
    actions = model.actions_for_level(level)
    return actions, model.fiber_points(actions, grid.angles())


def torus_average(
    g: Callable[[np.ndarray], np.ndarray],
    model: IntegrableModel,
    a: Sequence[float],
    grid: TorusGrid,
) -> float:
    """Q^g(a) = ∫ g(φ(I(a), θ)) dμ(θ) を一様テンソル格子で求める。"""
    _, points = fiber_sample(model, np.asarray(a, dtype=float), grid)
    values = np.asarray(g(points), dtype=float)
    if not np.all(np.isfinite(values)):
        raise DomainError(f"integrand is singular on the fiber over level {list(a)}")
    return grid.average(values)


def pairings_on_fiber(model: IntegrableModel, pert: Perturbation, points: np.ndarray) -> np.ndarray:
    """dH_i(K) = ω(X_{H_i}, K) を (n, 点数) で返す。"""
    return np.stack([omega_pairing(H, pert.field, points) for H in model.hamiltonians])


def averaged_rhs(
    model: IntegrableModel,
    pert: Perturbation,
    grid: TorusGrid,
    initial: Sequence[float] | None = None,
) -> AveragedODE:
    """rhs(a)_i = torus_average(ω(X_{H_i}, K), a)"""
    if pert.n != model.n:
        raise LabError(f"perturbation dimension {pert.n} != model dimension {model.n}")

    def rhs(a: np.ndarray) -> np.ndarray:
        _, points = fiber_sample(model, a, grid)
        values = pairings_on_fiber(model, pert, points)
        return values.mean(axis=-1)

    start = model.chart_center if initial is None else np.asarray(initial, dtype=float)
    return AveragedODE(rhs=rhs, initial=start, center=model.chart_center, radius=model.chart_radius)


def solve_averaged_ode(ode: AveragedODE, horizon: float, dt: float) -> AveragedPath:
    """古典的 RK4。チャート球を出たステップでは線分と球面の交点を脱出点とし、そこで止める。"""
    if not dt > 0:
        raise LabError(f"dt must be positive, got {dt}")
    if horizon < 0:
        raise LabError(f"horizon must be >= 0, got {horizon}")
    n_steps, h = fit_steps(horizon, dt) if horizon > 0 else (0, dt)
    times = [0.0]
    values = [ode.initial.copy()]
    y = ode.initial.copy()
    exit_time = float("inf")
    for j in range(n_steps):
        k1 = ode.rhs(y)
        k2 = ode.rhs(y + 0.5 * h * k1)
        k3 = ode.rhs(y + 0.5 * h * k2)
        k4 = ode.rhs(y + h * k3)
        y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y_new)):
            raise LabError(f"averaged ODE produced a non-finite value at step {j + 1}")
        s = segment_exit(y, y_new, ode.center, ode.radius)
        if s is not None:
            exit_time = j * h + s * h
            times.append(exit_time)
            values.append(y + s * (y_new - y))
            break
        y = y_new
        times.append((j + 1) * h)
        values.append(y.copy())
    return AveragedPath(times=np.asarray(times), values=np.asarray(values), exit_time=exit_time)


# --- 収束率 ---


def fit_rate(
    epsilons: Sequence[float], errors: Sequence[float], confidence: float = 0.95
) -> tuple[float, float, tuple[float, float]]:
    """log(error) を log(ε) に最小二乗で当てはめ、(傾き, 切片, 傾きの信頼区間) を返す。"""
    eps = np.asarray(epsilons, dtype=float)
    err = np.asarray(errors, dtype=float)
    if eps.size != err.size or eps.size < 2:
        raise ExperimentError("rate fit needs at least two (epsilon, error) pairs")
    if np.any(err <= 0) or np.any(~np.isfinite(err)):
        nan = float("nan")
        return nan, nan, (nan, nan)
    fit = stats.linregress(np.log(eps), np.log(err))
    dof = eps.size - 2
    if dof >= 1:
        half = float(stats.t.ppf(0.5 + 0.5 * confidence, dof) * fit.stderr)
    else:
        half = float("nan")
    slope = float(fit.slope)
    return slope, float(fit.intercept), (slope - half, slope + half)


def _moment_error(sups: np.ndarray, beta: float) -> tuple[float, float]:
    """(E Z)^(1/β), Z = sup^β と、デルタ法による標準誤差"""
    z = sups**beta
    m = float(np.mean(z))
    se_m = float(np.std(z, ddof=1) / np.sqrt(z.size)) if z.size > 1 else float("nan")
    if m <= 0:
        return 0.0, 0.0
    return m ** (1.0 / beta), (1.0 / beta) * m ** (1.0 / beta - 1.0) * se_m


def _record_stride(n_steps: int, record_points: int) -> int:
    return max(1, n_steps // max(1, record_points))


def rate_experiment(
    model: IntegrableModel,
    pert: Perturbation,
    y0: "PhasePoint | np.ndarray",
    t: float,
    beta: float,
    epsilons: Sequence[float],
    n_paths: int,
    master_seed: int,
    *,
    grid: TorusGrid | None = None,
    ode_dt: float = 1e-2,
    dt_max: float | None = None,
    dt_scale: float | None = None,
    record_points: int | None = None,
    scheme: str = "midpoint",
    runner_factory: RunnerFactory | None = None,
) -> RateFitResult:
    """
    各 ε について y^ε を時間 t/ε まで n_paths 本積分し、
    (E sup_{s≤t}‖H^ε(s∧T^ε) − H̄(s∧T^ε)‖^β)^(1/β) を求めて log-log の傾きを当てはめる。
    H^ε(s) = H(y_{s/ε})、sup は記録時刻上でとる。
    """
    eps = check_epsilons(epsilons)
    if n_paths < MIN_RATE_PATHS:
        raise ExperimentError(f"rate experiment needs n_paths >= {MIN_RATE_PATHS}, got {n_paths}")
    if not beta > 1:
        raise ExperimentError(f"beta must be > 1, got {beta}")
    grid = grid or default_grid(model)
    dt_max = dt_max or settings.DEFAULT_DT
    dt_scale = dt_scale or settings.DT_SCALE
    record_points = record_points or settings.RECORD_POINTS
    y0 = model.require_in_chart(as_coords(y0, model.n))
    h0 = model.energies(y0)

    ode = averaged_rhs(model, pert, grid, initial=h0)
    hbar = solve_averaged_ode(ode, t, ode_dt)
    if hbar.exit_time <= t:
        raise ExperimentError(f"t={t} is not before the averaged exit time T0={hbar.exit_time:.6g}")

    logger.info(
        "rate_experiment started: model=%s pert=%s t=%s beta=%s epsilons=%s n_paths=%d",
        model.name, pert.name, t, beta, eps.tolist(), n_paths,
    )
    runner = (runner_factory or LocalEnsembleRunner)(model, pert)
    errors, stderrs, used = [], [], []
    flags: list[str] = []
    for e in eps:
        n_steps, dt = fit_steps(t / e, policy_dt(e, dt_max, dt_scale))
        record = integrate_ensemble(
            model, pert, e, y0, t / e, dt, n_paths, master_seed,
            record_stride=_record_stride(n_steps, record_points),
            scheme=scheme,
            runner=runner,
        )
        exited = record.exited
        if exited.all():
            flags.append(f"all_paths_exited:epsilon={e!r}")
            logger.warning("rate_experiment: all paths exited before t: epsilon=%s", e)
            errors.append(float("nan"))
            stderrs.append(float("nan"))
            used.append(0)
            continue
        if exited.any():
            flags.append(f"early_exit:epsilon={e!r}:fraction={exited.mean()!r}")
        slow_times = e * record.times  # (S,)
        slow_exit = e * record.exit_times  # (P,)
        s_eff = np.minimum(slow_times[None, :], slow_exit[:, None])  # (P, S)
        target = hbar.at(s_eff)  # (P, S, n)
        sups = np.max(np.linalg.norm(record.energies - target, axis=-1), axis=-1)
        err, se = _moment_error(sups, beta)
        errors.append(err)
        stderrs.append(se)
        used.append(record.n_paths)
        logger.info(
            "rate_experiment epsilon done: epsilon=%s dt=%s steps=%d error=%.6g stderr=%.3g exited=%d",
            e, dt, n_steps, err, se, int(exited.sum()),
        )

    errors_arr = np.asarray(errors)
    if any(f.startswith("all_paths_exited") for f in flags):
        slope, intercept, ci = float("nan"), float("nan"), (float("nan"), float("nan"))
    else:
        slope, intercept, ci = fit_rate(eps, errors_arr)
        if not math.isfinite(slope):
            flags.append("rate_not_fitted:nonpositive_error")
    result = RateFitResult(
        epsilons=eps,
        errors=errors_arr,
        stderrs=np.asarray(stderrs),
        n_paths=np.asarray(used),
        beta=float(beta),
        slope=slope,
        intercept=intercept,
        slope_ci=ci,
        flags=flags,
        averaged=hbar,
    )
    logger.info("rate_experiment finished: slope=%s ci=%s flags=%s", slope, ci, flags)
    return result


# --- 脱出確率 ---


def exit_probability_experiment(
    model: IntegrableModel,
    pert: Perturbation,
    y0: "PhasePoint | np.ndarray",
    r: float | None,
    delta: float,
    epsilons: Sequence[float],
    n_paths: int,
    master_seed: int,
    *,
    horizon: float = 10.0,
    grid: TorusGrid | None = None,
    ode_dt: float = 1e-2,
    dt_max: float | None = None,
    dt_scale: float | None = None,
    scheme: str = "midpoint",
    runner_factory: RunnerFactory | None = None,
) -> ExitProbabilityTable:
    """
    T_δ = inf{t: ‖H̄_t − H(y₀)‖ ≥ r − δ}（平均化経路から。horizon まで探す）を求め、
    P(T^ε < T_δ) を y^ε を時間 T_δ/ε まで積分した脱出割合で推定する。
    """
    eps = check_epsilons(epsilons)
    if n_paths < 1:
        raise ExperimentError(f"n_paths must be >= 1, got {n_paths}")
    y0 = model.require_in_chart(as_coords(y0, model.n))
    h0 = model.energies(y0)
    # T_δ と脱出判定はどちらも H(y₀) 中心の球で測る
    model = model.with_chart(center=h0, radius=model.chart_radius if r is None else r)
    r = model.chart_radius
    if not 0 < delta < r:
        raise ExperimentError(f"delta must satisfy 0 < delta < r={r}, got {delta}")
    grid = grid or default_grid(model)
    dt_max = dt_max or settings.DEFAULT_DT
    dt_scale = dt_scale or settings.DT_SCALE

    hbar = solve_averaged_ode(averaged_rhs(model, pert, grid, initial=h0), horizon, ode_dt)
    t_delta = hbar.first_passage(h0, r - delta)
    flags: list[str] = []
    probabilities = np.zeros(eps.size)
    stderrs = np.zeros(eps.size)

    if not math.isfinite(t_delta):
        # 平均化経路が r − δ に届かない（rhs ≡ 0 など）。確率は 0 として報告する
        flags.append("t_delta_infinite:not_applicable")
        logger.warning("exit_probability_experiment: T_delta is infinite within horizon=%s", horizon)
    elif t_delta <= 0:
        flags.append("t_delta_zero")
    else:
        logger.info(
            "exit_probability_experiment started: model=%s pert=%s r=%s delta=%s T_delta=%.6g",
            model.name, pert.name, r, delta, t_delta,
        )
        runner = (runner_factory or LocalEnsembleRunner)(model, pert)
        for j, e in enumerate(eps):
            n_steps, dt = fit_steps(t_delta / e, policy_dt(e, dt_max, dt_scale))
            record = integrate_ensemble(
                model, pert, e, y0, n_steps * dt, dt, n_paths, master_seed,
                record_stride=n_steps,
                scheme=scheme,
                runner=runner,
            )
            hit = (e * record.exit_times) < t_delta
            p = float(np.mean(hit))
            probabilities[j] = p
            stderrs[j] = math.sqrt(p * (1.0 - p) / n_paths)
            logger.info("exit_probability epsilon done: epsilon=%s dt=%s probability=%.6g", e, dt, p)

    return ExitProbabilityTable(
        epsilons=eps,
        probabilities=probabilities,
        stderrs=stderrs,
        n_paths=n_paths,
        radius=float(r),
        delta=float(delta),
        t_delta=float(t_delta),
        flags=flags,
    )


# --- 結合偏差 ---


def deviation_experiment(
    model: IntegrableModel,
    pert: Perturbation,
    y0: "PhasePoint | np.ndarray",
    times: Sequence[float],
    epsilons: Sequence[float],
    n_paths: int,
    master_seed: int,
    *,
    dt: float | None = None,
    scheme: str = "midpoint",
    runner_factory: RunnerFactory | None = None,
) -> DeviationTable:
    """
    同じブラウン経路で y^ε と x = y⁰ を積分し、各 t について
    平均 sup_{s≤t}‖H(y^ε_s) − H(x_s)‖ を求める。
    """
    eps = check_epsilons(epsilons)
    times_arr = np.asarray(times, dtype=float)
    if times_arr.ndim != 1 or times_arr.size == 0 or np.any(times_arr <= 0):
        raise ExperimentError(f"deviation times must be positive, got {list(times)}")
    dt = dt or settings.DEFAULT_DT
    y0 = model.require_in_chart(as_coords(y0, model.n))
    step_counts = np.rint(times_arr / dt).astype(int)
    if np.any(np.abs(step_counts * dt - times_arr) > 1e-9 * np.maximum(1.0, times_arr)):
        raise ExperimentError(f"deviation times must be multiples of dt={dt}")
    stride = int(np.gcd.reduce(step_counts))
    horizon = float(step_counts.max() * dt)
    runner = (runner_factory or LocalEnsembleRunner)(model, pert)

    def ensemble(epsilon: float):
        return integrate_ensemble(
            model, pert, epsilon, y0, horizon, dt, n_paths, master_seed,
            record_stride=stride, scheme=scheme, runner=runner,
        )

    logger.info(
        "deviation_experiment started: model=%s pert=%s times=%s epsilons=%s n_paths=%d",
        model.name, pert.name, times_arr.tolist(), eps.tolist(), n_paths,
    )
    base = ensemble(0.0)
    idx = step_counts // stride
    means = np.empty((eps.size, times_arr.size))
    stderrs = np.empty_like(means)
    for j, e in enumerate(eps):
        rec = ensemble(float(e))
        gap = np.linalg.norm(rec.energies - base.energies, axis=-1)  # (P, S)
        running = np.maximum.accumulate(gap, axis=1)[:, idx]  # (P, T)
        means[j] = running.mean(axis=0)
        stderrs[j] = running.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.nan
        logger.debug("deviation epsilon done: epsilon=%s means=%s", e, means[j].tolist())

    return DeviationTable(epsilons=eps, times=times_arr, means=means, stderrs=stderrs, n_paths=n_paths)
