"""
二次スケーリング（時間 1/ε²）エンジン
ハミルトン的摂動 K = X_k について、ファイバーごとにポアソン方程式を解いて
a_ij(a) = −∫ω(K, X_{H_j}) L₀⁻¹(ω(K, X_{H_i})) dμ_a と
b_j(a) = ½∫ L_K L₀⁻¹(ω(X_{H_j}, K)) dμ_a を組み立て、極限 SDE を積分する。
"""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
from scipy import stats

from app.config import settings
from app.models.diffusion import DiffusionModel, WeakConvergenceResult
from app.models.errors import DomainError, ExperimentError, LabError, NonFiniteError
from app.models.phase import PhasePoint, as_coords
from app.models.system import IntegrableModel, Perturbation
from app.models.torus import GeneratorSpec, TorusFunction, TorusGrid
from app.models.trajectory import LimitRecord
from app.services.averaging import check_epsilons, default_grid, pairings_on_fiber
from app.services.noise import CHANNEL_LIMIT, BlockSource, NoiseBank
from app.services.poisson import solve_poisson, spectral_gradient
from app.services.sde_engine import (
    LocalEnsembleRunner,
    RunnerFactory,
    fit_steps,
    integrate_ensemble,
    policy_dt,
    steps_for,
)

logger = logging.getLogger(__name__)

READINGS = ("stratonovich", "ito", "generator")
NEGATIVE_EIG_WARN = -1e-8
FD_REL = 1e-4
EXCESSIVE_EXIT = 0.5


def level_axes(center: Sequence[float], radius: float, nodes: int) -> tuple[np.ndarray, ...]:
    """箱 [a₀ − r, a₀ + r]ⁿ を各次元 nodes 点で刻む。"""
    if nodes < 2:
        raise LabError(f"level grid needs >= 2 nodes per dimension, got {nodes}")
    center = np.asarray(center, dtype=float)
    return tuple(np.linspace(c - radius, c + radius, nodes) for c in center)


def symmetric_sqrt(a: np.ndarray) -> tuple[np.ndarray, float]:
    """対称行列の平方根 σ = V diag(√max(λ,0)) Vᵀ と最小固有値"""
    w, V = np.linalg.eigh(a)
    lam_min = float(w.min())
    if lam_min < NEGATIVE_EIG_WARN:
        logger.warning("negative eigenvalue clamped: lambda_min=%.3g", lam_min)
    root = np.sqrt(np.clip(w, 0.0, None))
    return (V * root) @ V.T, lam_min


def _fiber_poisson(
    model: IntegrableModel,
    pert: Perturbation,
    actions: np.ndarray,
    grid: TorusGrid,
    zero_mode: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    作用 actions のファイバー上で f_i = ω(K, X_{H_i}) = −dH_i(K) と h_i = L₀⁻¹f_i を求める。
    戻り値は (f (n, N), h (n, N), 点 (N, 2n), K (N, 2n))。
    """
    points = model.fiber_points(actions, grid.angles())
    K = pert.field(points)
    f = -pairings_on_fiber(model, pert, points)
    gen = GeneratorSpec.for_model(model, actions)
    h = np.stack(
        [
            solve_poisson(TorusFunction(grid=grid, values=f_i, actions=actions), gen, zero_mode=zero_mode).flat()
            for f_i in f
        ]
    )
    return f, h, points, K


def node_coefficients(
    model: IntegrableModel,
    pert: Perturbation,
    level: Sequence[float],
    grid: TorusGrid,
    *,
    zero_mode: float = 0.0,
    fd_rel: float = FD_REL,
) -> tuple[np.ndarray, np.ndarray]:
    """レベル節点 a での (a_ij（対称化前）, b_j)"""
    actions = model.actions_for_level(np.asarray(level, dtype=float))
    f, h, points, K = _fiber_poisson(model, pert, actions, grid, zero_mode)
    n = model.n

    a_raw = -np.einsum("jN,iN->ij", f, h) / grid.size

    # h̃_j = L₀⁻¹(ω(X_{H_j}, K)) = −h_j、dh̃_j(K) = Σ_k ∂h̃_j/∂I_k K_I^k + Σ_k ∂h̃_j/∂θ_k K_θ^k
    K_I, K_theta = model.chart_velocity(points, K)
    htilde = -h
    dh = np.zeros_like(htilde)
    for j in range(n):
        grad_theta = spectral_gradient(TorusFunction(grid=grid, values=htilde[j])).reshape(n, -1)
        dh[j] = np.einsum("kN,Nk->N", grad_theta, K_theta)
    for k in range(n):
        step = fd_rel * max(1.0, abs(actions[k]))
        if actions[k] - step <= 0:
            raise DomainError(f"action {actions[k]:.3g} too close to the critical set for differencing")
        e = np.zeros(n)
        e[k] = step
        _, h_plus, _, _ = _fiber_poisson(model, pert, actions + e, grid, zero_mode)
        _, h_minus, _, _ = _fiber_poisson(model, pert, actions - e, grid, zero_mode)
        dh += -(h_plus - h_minus) / (2.0 * step) * K_I[:, k]
    b = 0.5 * dh.mean(axis=-1)
    if not (np.all(np.isfinite(a_raw)) and np.all(np.isfinite(b))):
        raise NonFiniteError(f"non-finite second-order coefficients at level {list(level)}")
    return a_raw, b


def assemble_diffusion(
    model: IntegrableModel,
    pert: Perturbation,
    axes: Sequence[np.ndarray] | None = None,
    grid: TorusGrid | None = None,
    *,
    level_nodes: int = 9,
    zero_mode: float = 0.0,
    fd_rel: float = FD_REL,
) -> DiffusionModel:
    """レベル格子の各節点で (a, σ, b) を求める。a は σ を取る前に (a + aᵀ)/2 に対称化する。"""
    if not pert.is_hamiltonian:
        raise ExperimentError(
            f"second-order limit needs a Hamiltonian perturbation; {pert.name} has no generating function"
        )
    grid = grid or default_grid(model)
    axes = tuple(axes) if axes is not None else level_axes(model.chart_center, model.chart_radius, level_nodes)
    shape = tuple(len(ax) for ax in axes)
    n = model.n
    mesh = np.meshgrid(*axes, indexing="ij")
    levels = np.stack([g.ravel() for g in mesh], axis=-1)

    logger.info(
        "assemble_diffusion started: model=%s pert=%s nodes=%d torus_m=%d",
        model.name, pert.name, levels.shape[0], grid.m,
    )
    a = np.empty((levels.shape[0], n, n))
    sigma = np.empty_like(a)
    b = np.empty((levels.shape[0], n))
    asymmetry = 0.0
    lam_min = math.inf
    clamped = 0
    for j, level in enumerate(levels):
        a_raw, b[j] = node_coefficients(model, pert, level, grid, zero_mode=zero_mode, fd_rel=fd_rel)
        asymmetry = max(asymmetry, float(np.max(np.abs(a_raw - a_raw.T))))
        a[j] = 0.5 * (a_raw + a_raw.T)
        sigma[j], node_min = symmetric_sqrt(a[j])
        lam_min = min(lam_min, node_min)
        clamped += int(node_min < NEGATIVE_EIG_WARN)
        logger.debug("diffusion node done: level=%s a=%s b=%s", level.tolist(), a[j].tolist(), b[j].tolist())

    metadata = {
        "model": model.spec,
        "perturbation": pert.name,
        "torus_m": grid.m,
        "fd_rel": fd_rel,
        "zero_mode": zero_mode,
        "symmetrized": True,
        "max_asymmetry": asymmetry,
        "min_eigenvalue": lam_min,
        "clamped_nodes": clamped,
    }
    return DiffusionModel(
        axes=axes,
        a=a.reshape(shape + (n, n)),
        sigma=sigma.reshape(shape + (n, n)),
        b=b.reshape(shape + (n,)),
        center=model.chart_center,
        radius=model.chart_radius,
        metadata=metadata,
    )


# --- 極限 SDE ---


def _noise_term(sigma: np.ndarray, dB: np.ndarray) -> np.ndarray:
    # Σ_i σ^j_i ΔB^i
    return np.einsum("pji,pi->pj", sigma, dB)


def simulate_limit_sde(
    dm: DiffusionModel,
    z0: Sequence[float] | np.ndarray,
    horizon: float,
    dt: float,
    noise: BlockSource,
    *,
    reading: str = "stratonovich",
    record_stride: int | None = None,
    paths: Sequence[int] | None = None,
) -> LimitRecord:
    """
    レベル空間の SDE を積分する。
    - stratonovich: dz = σ∘dB + b dt（Heun）
    - ito: dz = σ dB + b dt（Euler–Maruyama）
    - generator: dz = √2 σ dB − 2b dt（Euler–Maruyama）
    ステップ後の値が ‖z − a₀‖ ≥ r となる行（stratonovich では予測子が格子の箱を出た行も）は
    直前の内点で停止し、そのステップの時刻を脱出時刻とする。
    """
    if reading not in READINGS:
        raise LabError(f"unknown limit SDE reading {reading!r}; use one of {READINGS}")
    z = np.array(np.atleast_2d(np.asarray(z0, dtype=float)), dtype=float)
    if z.shape[-1] != dm.n:
        raise LabError(f"z0 must have {dm.n} components, got {z.shape}")
    if noise.n_paths != z.shape[0]:
        if z.shape[0] != 1:
            raise LabError(f"{z.shape[0]} start points for {noise.n_paths} noise paths")
        z = np.repeat(z, noise.n_paths, axis=0)
    if noise.n_streams != dm.n or not math.isclose(noise.dt, dt, rel_tol=1e-12):
        raise LabError("noise source does not match the diffusion dimension or dt")
    if not np.all(np.linalg.norm(z - dm.center, axis=-1) < dm.radius):
        raise DomainError("z0 outside the chart ball")

    n_steps = steps_for(horizon, dt)
    stride = record_stride or max(1, n_steps // settings.RECORD_POINTS)
    rec = list(range(0, n_steps + 1, stride))
    if rec[-1] != n_steps:
        rec.append(n_steps)
    rec_steps = np.asarray(rec)
    P = z.shape[0]
    values = np.empty((P, rec_steps.size, dm.n))
    values[:, 0] = z
    exit_times = np.full(P, np.inf)
    active = np.ones(P, dtype=bool)
    next_rec = 1
    done = 0
    sqrt2 = math.sqrt(2.0)

    while done < n_steps and active.any():
        k = min(settings.NOISE_BLOCK_STEPS, n_steps - done)
        block = noise.draw(k)
        for j in range(k):
            idx = np.flatnonzero(active)
            s = done + j + 1
            if idx.size:
                zi, dB = z[idx], block[idx, j]
                if reading == "stratonovich":
                    f0 = _noise_term(dm.sigma_field(zi), dB) + dm.b_field(zi) * dt
                    pred = zi + f0
                    ok = dm.inside(pred)
                    z_new = zi.copy()
                    if ok.any():
                        f1 = _noise_term(dm.sigma_field(pred[ok]), dB[ok]) + dm.b_field(pred[ok]) * dt
                        z_new[ok] = zi[ok] + 0.5 * (f0[ok] + f1)
                    stopped = ~ok
                elif reading == "ito":
                    z_new = zi + _noise_term(dm.sigma_field(zi), dB) + dm.b_field(zi) * dt
                    stopped = np.zeros(idx.size, dtype=bool)
                else:
                    z_new = zi + sqrt2 * _noise_term(dm.sigma_field(zi), dB) - 2.0 * dm.b_field(zi) * dt
                    stopped = np.zeros(idx.size, dtype=bool)
                out = stopped | (np.linalg.norm(z_new - dm.center, axis=-1) >= dm.radius)
                # 球を出るステップは採らず、最後の内点で止める（読み方によらず同じ）
                z_new[out] = zi[out]
                z[idx] = z_new
                if out.any():
                    rows = idx[out]
                    exit_times[rows] = s * dt
                    active[rows] = False
            if next_rec < rec_steps.size and s == rec_steps[next_rec]:
                values[:, next_rec] = z
                next_rec += 1
        done += k
    if next_rec < rec_steps.size:
        values[:, next_rec:] = z[:, None, :]

    return LimitRecord(
        times=rec_steps * dt,
        values=values,
        exit_times=exit_times,
        final_values=z.copy(),
        dt=float(dt),
        reading=reading,
        paths=np.arange(P) if paths is None else np.asarray(paths),
    )


def limit_ensemble(
    dm: DiffusionModel,
    z0: Sequence[float],
    horizon: float,
    dt: float,
    n_paths: int,
    master_seed: int,
    *,
    reading: str = "stratonovich",
    record_stride: int | None = None,
    batch_size: int | None = None,
) -> LimitRecord:
    """極限 SDE を n_paths 本、パス番号順のバッチで積分する（チャネルは摂動系と別）。"""
    if n_paths < 1:
        raise ExperimentError(f"n_paths must be >= 1, got {n_paths}")
    batch_size = batch_size or settings.BATCH_SIZE
    parts = []
    for start in range(0, n_paths, batch_size):
        paths = range(start, min(start + batch_size, n_paths))
        bank = NoiseBank.for_paths(master_seed, paths, dm.n, dt, CHANNEL_LIMIT)
        parts.append(
            simulate_limit_sde(
                dm, z0, horizon, dt, bank, reading=reading, record_stride=record_stride, paths=list(paths)
            )
        )
    first = parts[0]
    return LimitRecord(
        times=first.times,
        values=np.concatenate([p.values for p in parts], axis=0),
        exit_times=np.concatenate([p.exit_times for p in parts]),
        final_values=np.concatenate([p.final_values for p in parts], axis=0),
        dt=first.dt,
        reading=reading,
        paths=np.concatenate([p.paths for p in parts]),
    )


# --- 弱収束 ---


def sample_moments(values: np.ndarray) -> dict[str, np.ndarray]:
    """成分ごとの平均・分散とそのモンテカルロ標準誤差。values は (P, n)。"""
    P = values.shape[0]
    mean = values.mean(axis=0)
    centered = values - mean
    var = centered.var(axis=0, ddof=1) if P > 1 else np.zeros(values.shape[1])
    m4 = np.mean(centered**4, axis=0)
    return {
        "mean": mean,
        "mean_se": np.sqrt(var / P),
        "var": var,
        "var_se": np.sqrt(np.clip(m4 - var**2, 0.0, None) / P),
    }


def weak_convergence_experiment(
    model: IntegrableModel,
    pert: Perturbation,
    y0: "PhasePoint | np.ndarray",
    t: float,
    epsilons: Sequence[float],
    n_paths: int,
    master_seed: int,
    *,
    dm: DiffusionModel | None = None,
    grid: TorusGrid | None = None,
    level_nodes: int = 9,
    reading: str = "generator",
    limit_dt: float | None = None,
    dt_max: float | None = None,
    dt_scale: float | None = None,
    scheme: str = "midpoint",
    runner_factory: RunnerFactory | None = None,
) -> WeakConvergenceResult:
    """
    H(y^ε_{t/ε²})（S^ε で停止）と極限 SDE の z_t（境界で停止）の法則を比べる。
    成分ごとの平均・分散・共分散、経験分布関数の距離（2 標本 KS 統計量）を ε ごとに出す。
    """
    eps = check_epsilons(epsilons)
    if not pert.is_hamiltonian:
        raise ExperimentError(f"weak convergence needs a Hamiltonian perturbation, got {pert.name}")
    if n_paths < 2:
        raise ExperimentError(f"n_paths must be >= 2, got {n_paths}")
    dt_max = dt_max or settings.DEFAULT_DT
    dt_scale = dt_scale or settings.DT_SCALE
    y0 = model.require_in_chart(as_coords(y0, model.n))
    z0 = model.energies(y0)
    n = model.n
    flags: list[str] = []

    if dm is None:
        dm = assemble_diffusion(model, pert, grid=grid, level_nodes=level_nodes)
    if dm.metadata.get("clamped_nodes"):
        flags.append(f"negative_eigenvalues_clamped:nodes={dm.metadata['clamped_nodes']}")

    n_lim, dt_lim = fit_steps(t, limit_dt or dt_max)
    limit = limit_ensemble(dm, z0, n_lim * dt_lim, dt_lim, n_paths, master_seed, reading=reading, record_stride=n_lim)
    lim_vals = limit.final_values
    lim_stats = sample_moments(lim_vals)
    if limit.exited.mean() > EXCESSIVE_EXIT:
        flags.append(f"excessive_exit:epsilon=0.0:fraction={limit.exited.mean()!r}")

    logger.info(
        "weak_convergence_experiment started: model=%s pert=%s t=%s epsilons=%s n_paths=%d reading=%s",
        model.name, pert.name, t, eps.tolist(), n_paths, reading,
    )
    moments: list[dict[str, float]] = []
    covariances: list[dict[str, float]] = []
    comparison: list[dict[str, float]] = []

    def add_cov(epsilon: float, values: np.ndarray) -> None:
        cov = np.atleast_2d(np.cov(values, rowvar=False))
        for i in range(n):
            for j in range(n):
                covariances.append({"epsilon": epsilon, "component_i": i + 1, "component_j": j + 1, "cov": float(cov[i, j])})

    for i in range(n):
        moments.append(
            {
                "epsilon": 0.0,
                "component": i + 1,
                "mean": float(lim_stats["mean"][i]),
                "mean_se": float(lim_stats["mean_se"][i]),
                "var": float(lim_stats["var"][i]),
                "var_se": float(lim_stats["var_se"][i]),
                "cdf_distance": 0.0,
            }
        )
    add_cov(0.0, lim_vals)

    runner = (runner_factory or LocalEnsembleRunner)(model, pert)
    exit_fractions: dict[float, float] = {0.0: float(limit.exited.mean())}
    for e in eps:
        horizon = t / e**2
        n_steps, dt = fit_steps(horizon, policy_dt(e, dt_max, dt_scale))
        record = integrate_ensemble(
            model, pert, e, y0, n_steps * dt, dt, n_paths, master_seed,
            record_stride=n_steps, scheme=scheme, runner=runner,
        )
        vals = record.exit_energies
        frac = float(record.exited.mean())
        exit_fractions[float(e)] = frac
        if frac > EXCESSIVE_EXIT:
            flags.append(f"excessive_exit:epsilon={e!r}:fraction={frac!r}")
            logger.warning("weak_convergence: excessive early exit: epsilon=%s fraction=%.3f", e, frac)
        st = sample_moments(vals)
        for i in range(n):
            ks = stats.ks_2samp(vals[:, i], lim_vals[:, i])
            moments.append(
                {
                    "epsilon": float(e),
                    "component": i + 1,
                    "mean": float(st["mean"][i]),
                    "mean_se": float(st["mean_se"][i]),
                    "var": float(st["var"][i]),
                    "var_se": float(st["var_se"][i]),
                    "cdf_distance": float(ks.statistic),
                }
            )
            comparison.append(
                {
                    "epsilon": float(e),
                    "component": i + 1,
                    "mean_diff": float(st["mean"][i] - lim_stats["mean"][i]),
                    "mean_diff_se": float(math.hypot(st["mean_se"][i], lim_stats["mean_se"][i])),
                    "var_diff": float(st["var"][i] - lim_stats["var"][i]),
                    "var_diff_se": float(math.hypot(st["var_se"][i], lim_stats["var_se"][i])),
                }
            )
        add_cov(float(e), vals)
        logger.info("weak_convergence epsilon done: epsilon=%s dt=%s steps=%d exit_fraction=%.3f", e, dt, n_steps, frac)

    return WeakConvergenceResult(
        epsilons=eps,
        t=float(t),
        reading=reading,
        moments=moments,
        covariances=covariances,
        comparison=comparison,
        exit_fractions=exit_fractions,
        flags=flags,
        diffusion=dm,
    )
