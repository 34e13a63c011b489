"""
実験ジョブの実行
ExperimentConfig を受け取り、系を組み立てて実験を振り分け、ResultBundle を返す。
workers > 1 のときはパスのバッチをプロセスプールに配り、パス番号順に組み直す。
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import Executor, ProcessPoolExecutor
from typing import Any, Callable

import numpy as np

from app.config import settings
from app.models.errors import LabError
from app.models.experiment import ExperimentConfig, ResultBundle, Table
from app.models.phase import as_coords
from app.models.system import IntegrableModel, Perturbation
from app.models.torus import GeneratorSpec, TorusFunction, TorusGrid
from app.models.trajectory import EnsembleRecord
from app.services.averaging import (
    averaged_rhs,
    deviation_experiment,
    exit_probability_experiment,
    rate_experiment,
    solve_averaged_ode,
)
from app.services.model_library import build_model, build_perturbation, rebuild_model
from app.services.noise import CHANNEL_CHECK, SeedDescriptor
from app.services.poisson import apply_generator, random_band_limited, solve_poisson
from app.services.sde_engine import (
    EnsembleRequest,
    LocalEnsembleRunner,
    RunnerFactory,
    fit_steps,
    integrate_ensemble,
    run_request_batch,
)
from app.services.second_order import (
    assemble_diffusion,
    limit_ensemble,
    sample_moments,
    weak_convergence_experiment,
)

logger = logging.getLogger(__name__)

POISSON_RANDOM_CASES = 20


# --- 系の組み立て ---


def resolve_system(config: ExperimentConfig) -> tuple[IntegrableModel, Perturbation, np.ndarray]:
    """設定から (モデル, 摂動, y₀) を作る。チャート中心は H(y₀)。"""
    actions = config.actions
    if config.y0 is not None:
        bare = build_model(config.model, config.params, drift=config.drift)
        y0 = as_coords(np.asarray(config.y0, dtype=float), bare.n)
        actions = bare.to_action_angle(y0)[0].tolist()
    model = build_model(config.model, config.params, drift=config.drift, actions=actions, radius=config.radius)
    if config.y0 is None:
        I0 = np.asarray(actions, dtype=float) if actions is not None else np.ones(model.n)
        theta0 = np.asarray(config.angles, dtype=float) if config.angles is not None else np.zeros(model.n)
        y0 = model.from_action_angle(I0, theta0)
    pert = build_perturbation(model, config.perturbation)
    model.require_in_chart(y0)
    return model, pert, y0


# --- プロセスプール ---

# ワーカープロセス内のモデル・摂動キャッシュ
_WORKER_SYSTEMS: dict[str, tuple[IntegrableModel, Perturbation]] = {}


def _worker_system(model_spec: dict[str, Any], pert_name: str | None) -> tuple[IntegrableModel, Perturbation | None]:
    key = json.dumps([model_spec, pert_name], sort_keys=True)
    cached = _WORKER_SYSTEMS.get(key)
    if cached is None:
        model = rebuild_model(model_spec)
        pert = build_perturbation(model, pert_name) if pert_name is not None else None
        cached = (model, pert)
        _WORKER_SYSTEMS[key] = cached
    return cached


def _run_batch_task(
    model_spec: dict[str, Any], pert_name: str | None, request: EnsembleRequest, start: int, stop: int
) -> EnsembleRecord:
    model, pert = _worker_system(model_spec, pert_name)
    return run_request_batch(model, pert, request, range(start, stop))


class PoolEnsembleRunner:
    """バッチをプロセスプールで処理し、投入順（パス番号順）に結果をつなぐ。"""

    def __init__(
        self,
        executor: Executor,
        model: IntegrableModel,
        pert: Perturbation | None,
        batch_size: int | None = None,
    ):
        self.executor = executor
        self.model_spec = model.spec
        self.pert_name = pert.name if pert is not None else None
        self.batch_size = batch_size or settings.BATCH_SIZE

    def __call__(self, request: EnsembleRequest) -> EnsembleRecord:
        batches = request.path_batches(self.batch_size)
        futures = [
            self.executor.submit(
                _run_batch_task, self.model_spec, self.pert_name, request, b.start, b.stop
            )
            for b in batches
        ]
        logger.debug("pool dispatch: batches=%d paths=%d", len(futures), request.n_paths)
        return EnsembleRecord.concatenate([f.result() for f in futures])


def pool_runner_factory(executor: Executor, batch_size: int | None = None) -> RunnerFactory:
    def factory(model: IntegrableModel, pert: Perturbation | None) -> PoolEnsembleRunner:
        return PoolEnsembleRunner(executor, model, pert, batch_size)

    return factory


# --- 実験 ---


def _unique_flags(flags: list[str]) -> list[str]:
    return list(dict.fromkeys(flags))


def _run_simulate(config, model, pert, y0, factory) -> ResultBundle:
    n_steps, dt = fit_steps(config.horizon, config.dt)
    stride = max(1, n_steps // config.record_points)
    record = integrate_ensemble(
        model, pert, config.epsilon, y0, n_steps * dt, dt, config.n_paths, config.master_seed,
        record_stride=stride, scheme=config.scheme, runner=factory(model, pert),
    )
    n = model.n
    energies = Table(
        name="energies",
        columns=["path", "time"] + [f"H_{i + 1}" for i in range(n)],
        rows=[
            [int(record.paths[p]), float(record.times[s])] + record.energies[p, s].tolist()
            for p in range(record.n_paths)
            for s in range(record.times.size)
            if record.times[s] <= record.exit_times[p]
        ],
    )
    exits = Table(
        name="exits",
        columns=["path", "exit_time"],
        rows=[[int(record.paths[p]), float(record.exit_times[p])] for p in range(record.n_paths)],
    )
    h0 = record.energies[:, :1, :]
    rel = np.max(np.abs(record.energies - h0) / np.abs(h0), axis=1)  # (P, n)
    drift = Table(
        name="drift",
        columns=["path"] + [f"max_rel_drift_{i + 1}" for i in range(n)],
        rows=[[int(record.paths[p])] + rel[p].tolist() for p in range(record.n_paths)],
    )
    flags = []
    if record.exited.any():
        flags.append(f"paths_exited:count={int(record.exited.sum())}")
    return ResultBundle(
        experiment="simulate",
        config=config,
        tables=[energies, exits, drift],
        summary={"max_rel_drift": rel.max(axis=0).tolist(), "exited": int(record.exited.sum())},
        flags=flags,
        n_paths_total=record.n_paths,
    )


def _run_average(config, model, pert, y0, factory) -> ResultBundle:
    grid = TorusGrid(n=model.n, m=config.torus_m)
    ode = averaged_rhs(model, pert, grid, initial=model.energies(y0))
    path = solve_averaged_ode(ode, config.horizon, config.ode_dt)
    n = model.n
    rows = []
    for t, v in zip(path.times, path.values):
        rows.append([float(t)] + v.tolist() + ode.rhs(v).tolist())
    table = Table(
        name="averaged",
        columns=["time"] + [f"Hbar_{i + 1}" for i in range(n)] + [f"rhs_{i + 1}" for i in range(n)],
        rows=rows,
    )
    return ResultBundle(
        experiment="average",
        config=config,
        tables=[table],
        summary={"exit_time": path.exit_time, "rhs_initial": ode.rhs(ode.initial).tolist()},
        flags=["averaged_path_exited"] if path.exited else [],
    )


def _run_rate(config, model, pert, y0, factory) -> ResultBundle:
    result = rate_experiment(
        model, pert, y0, config.horizon, config.beta, config.epsilons, config.n_paths, config.master_seed,
        grid=TorusGrid(n=model.n, m=config.torus_m),
        ode_dt=config.ode_dt,
        dt_max=config.dt,
        dt_scale=config.dt_scale,
        record_points=config.record_points,
        scheme=config.scheme,
        runner_factory=factory,
    )
    rate = Table(
        name="rate",
        columns=["epsilon", "error", "stderr", "n_paths"],
        rows=[
            [float(e), float(err), float(se), int(n)]
            for e, err, se, n in zip(result.epsilons, result.errors, result.stderrs, result.n_paths)
        ],
    )
    fit = Table(
        name="rate_fit",
        columns=["beta", "slope", "intercept", "ci_low", "ci_high", "within_band"],
        rows=[[result.beta, result.slope, result.intercept, result.slope_ci[0], result.slope_ci[1],
               int(result.within_band())]],
    )
    return ResultBundle(
        experiment="rate",
        config=config,
        tables=[rate, fit],
        summary={"slope": result.slope, "slope_ci": list(result.slope_ci)},
        flags=result.flags,
        n_paths_total=int(result.n_paths.sum()),
    )


def _run_exitprob(config, model, pert, y0, factory) -> ResultBundle:
    delta = config.delta if config.delta is not None else 0.25 * model.chart_radius
    table_data = exit_probability_experiment(
        model, pert, y0, None, delta, config.epsilons, config.n_paths, config.master_seed,
        horizon=config.horizon,
        grid=TorusGrid(n=model.n, m=config.torus_m),
        ode_dt=config.ode_dt,
        dt_max=config.dt,
        dt_scale=config.dt_scale,
        scheme=config.scheme,
        runner_factory=factory,
    )
    table = Table(
        name="exitprob",
        columns=["epsilon", "probability", "stderr", "n_paths", "t_delta"],
        rows=[
            [float(e), float(p), float(se), table_data.n_paths, table_data.t_delta]
            for e, p, se in zip(table_data.epsilons, table_data.probabilities, table_data.stderrs)
        ],
    )
    simulated = 0 if table_data.flags else table_data.n_paths * table_data.epsilons.size
    return ResultBundle(
        experiment="exitprob",
        config=config,
        tables=[table],
        summary={"radius": table_data.radius, "delta": table_data.delta, "t_delta": table_data.t_delta},
        flags=table_data.flags,
        n_paths_total=simulated,
    )


def _diffusion_table(dm) -> Table:
    n = dm.n
    pairs = [(i, j) for i in range(n) for j in range(n)]
    nodes = dm.nodes()
    a = dm.a.reshape(-1, n, n)
    s = dm.sigma.reshape(-1, n, n)
    b = dm.b.reshape(-1, n)
    return Table(
        name="diffusion",
        columns=[f"level_{i + 1}" for i in range(n)]
        + [f"a_{i + 1}{j + 1}" for i, j in pairs]
        + [f"sigma_{i + 1}{j + 1}" for i, j in pairs]
        + [f"b_{j + 1}" for j in range(n)],
        rows=[
            nodes[k].tolist() + [float(a[k, i, j]) for i, j in pairs]
            + [float(s[k, i, j]) for i, j in pairs] + b[k].tolist()
            for k in range(nodes.shape[0])
        ],
    )


def _run_limit2(config, model, pert, y0, factory) -> ResultBundle:
    dm = assemble_diffusion(
        model, pert,
        grid=TorusGrid(n=model.n, m=config.torus_m),
        level_nodes=config.level_nodes,
        zero_mode=config.zero_mode,
    )
    n_steps, dt = fit_steps(config.horizon, config.limit_dt or config.dt)
    limit = limit_ensemble(
        dm, model.energies(y0), n_steps * dt, dt, config.n_paths, config.master_seed,
        reading=config.reading, record_stride=n_steps,
    )
    st = sample_moments(limit.final_values)
    exit_fraction = float(limit.exited.mean())
    moments = Table(
        name="limit_moments",
        columns=["component", "mean", "mean_se", "var", "var_se", "exit_fraction"],
        rows=[
            [i + 1, float(st["mean"][i]), float(st["mean_se"][i]), float(st["var"][i]), float(st["var_se"][i]),
             exit_fraction]
            for i in range(model.n)
        ],
    )
    flags = []
    if dm.metadata.get("clamped_nodes"):
        flags.append(f"negative_eigenvalues_clamped:nodes={dm.metadata['clamped_nodes']}")
    if exit_fraction > 0.5:
        flags.append(f"excessive_exit:epsilon=0.0:fraction={exit_fraction!r}")
    return ResultBundle(
        experiment="limit2",
        config=config,
        tables=[_diffusion_table(dm), moments],
        documents={"diffusion.json": dm.to_json()},
        summary={"reading": config.reading, "max_asymmetry": dm.metadata["max_asymmetry"]},
        flags=flags,
        n_paths_total=limit.n_paths,
    )


def _run_weak2(config, model, pert, y0, factory) -> ResultBundle:
    grid = TorusGrid(n=model.n, m=config.torus_m)
    dm = assemble_diffusion(model, pert, grid=grid, level_nodes=config.level_nodes, zero_mode=config.zero_mode)
    result = weak_convergence_experiment(
        model, pert, y0, config.horizon, config.epsilons, config.n_paths, config.master_seed,
        dm=dm,
        grid=grid,
        level_nodes=config.level_nodes,
        reading=config.reading,
        limit_dt=config.limit_dt,
        dt_max=config.dt,
        dt_scale=config.dt_scale,
        scheme=config.scheme,
        runner_factory=factory,
    )

    def to_table(name: str, rows: list[dict[str, float]], columns: list[str]) -> Table:
        return Table(name=name, columns=columns, rows=[[r[c] for c in columns] for r in rows])

    tables = [
        to_table("moments", result.moments,
                 ["epsilon", "component", "mean", "mean_se", "var", "var_se", "cdf_distance"]),
        to_table("covariances", result.covariances, ["epsilon", "component_i", "component_j", "cov"]),
        to_table("comparison", result.comparison,
                 ["epsilon", "component", "mean_diff", "mean_diff_se", "var_diff", "var_diff_se"]),
    ]
    documents = {"diffusion.json": result.diffusion.to_json()} if result.diffusion is not None else {}
    return ResultBundle(
        experiment="weak2",
        config=config,
        tables=tables,
        documents=documents,
        summary={"reading": result.reading, "exit_fractions": {str(k): v for k, v in result.exit_fractions.items()}},
        flags=result.flags,
        n_paths_total=config.n_paths * (len(config.epsilons) + 1),
    )


def poisson_residuals(model: IntegrableModel, config: ExperimentConfig) -> list[list[Any]]:
    """解析解 cosθ → −2cosθ と、ランダム帯域制限関数の往復残差 ‖L₀(L₀⁻¹f) − f‖∞"""
    rows: list[list[Any]] = []
    unit = GeneratorSpec(freq=np.eye(1), drift_freq=np.zeros(1))
    grid1 = TorusGrid(n=1, m=config.torus_m)
    cos = TorusFunction.sample(grid1, lambda th: np.cos(th[:, 0]))
    h = solve_poisson(cos, unit)
    rows.append(["analytic_cos", 1, float(np.max(np.abs(h.values + 2.0 * cos.values)))])

    I0 = model.actions_for_level(model.chart_center)
    setups = [(model.n, GeneratorSpec.for_model(model, I0))]
    if model.n != 1:
        setups.insert(0, (1, unit))
    for dim, gen in setups:
        grid = TorusGrid(n=dim, m=config.torus_m)
        for k in range(POISSON_RANDOM_CASES):
            rng = SeedDescriptor(config.master_seed, stream=100 * dim + k, channel=CHANNEL_CHECK).generator()
            f = random_band_limited(grid, rng)
            back = apply_generator(solve_poisson(f, gen), gen)
            rows.append([f"random_{k}", dim, float(np.max(np.abs(back.values - f.values)))])
    return rows


def _run_poisson_check(config, model, pert, y0, factory) -> ResultBundle:
    rows = poisson_residuals(model, config)
    worst = max(r[2] for r in rows)
    return ResultBundle(
        experiment="poisson-check",
        config=config,
        tables=[Table(name="poisson", columns=["case", "dimension", "max_residual"], rows=rows)],
        summary={"max_residual": worst},
        flags=[f"poisson_residual_high:{worst!r}"] if worst > 1e-8 else [],
    )


def _run_deviation(config, model, pert, y0, factory) -> ResultBundle:
    times = config.times or [config.horizon]
    dev = deviation_experiment(
        model, pert, y0, times, config.epsilons, config.n_paths, config.master_seed,
        dt=config.dt, scheme=config.scheme, runner_factory=factory,
    )
    rows = [
        [float(e), float(t), float(dev.means[i, j]), float(dev.stderrs[i, j]), dev.n_paths]
        for i, e in enumerate(dev.epsilons)
        for j, t in enumerate(dev.times)
    ]
    return ResultBundle(
        experiment="deviation",
        config=config,
        tables=[Table(name="deviation", columns=["epsilon", "time", "mean_sup_deviation", "stderr", "n_paths"],
                      rows=rows)],
        n_paths_total=config.n_paths * (len(config.epsilons) + 1),
    )


_DISPATCH: dict[str, Callable[..., ResultBundle]] = {
    "simulate": _run_simulate,
    "average": _run_average,
    "rate": _run_rate,
    "exitprob": _run_exitprob,
    "limit2": _run_limit2,
    "weak2": _run_weak2,
    "poisson-check": _run_poisson_check,
    "deviation": _run_deviation,
}


def run(config: ExperimentConfig) -> ResultBundle:
    """
    実験を 1 件実行する。
    LabError はそのまま呼び出し側へ（CLI が error_class 付きで報告する）。
    """
    handler = _DISPATCH.get(config.experiment)
    if handler is None:
        raise LabError(f"unknown experiment {config.experiment!r}")
    logger.info(
        "run started: experiment=%s model=%s perturbation=%s workers=%d seed=%d",
        config.experiment, config.model, config.perturbation, config.workers, config.master_seed,
    )
    started = time.perf_counter()
    model, pert, y0 = resolve_system(config)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as executor:
            bundle = handler(config, model, pert, y0, pool_runner_factory(executor))
    else:
        bundle = handler(config, model, pert, y0, LocalEnsembleRunner)
    bundle.flags = _unique_flags(bundle.flags)
    bundle.wall_clock = time.perf_counter() - started
    for flag in bundle.flags:
        logger.warning("run flag: experiment=%s flag=%s", config.experiment, flag)
    logger.info(
        "run finished: experiment=%s tables=%d paths=%d seconds=%.2f",
        config.experiment, len(bundle.tables), bundle.n_paths_total, bundle.wall_clock,
    )
    return bundle
