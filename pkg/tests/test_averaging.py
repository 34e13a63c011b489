"""
平均化エンジン（一次スケーリング）のテスト
"""
import numpy as np
import pytest
from scipy import integrate

from app.models.averaged import AveragedODE, RateFitResult
from app.models.errors import ExperimentError
from app.models.torus import TorusGrid
from app.services.averaging import (
    averaged_rhs,
    check_epsilons,
    deviation_experiment,
    exit_probability_experiment,
    fit_rate,
    rate_experiment,
    solve_averaged_ode,
    torus_average,
)
from app.services.model_library import build_harmonic_family, build_perturbation, build_r4_example
from app.services.symplectic import omega_pairing

SEED = 20240611
GRID2 = TorusGrid(n=2, m=32)


def _y0(model):
    return model.from_action_angle(model.actions_for_level(model.chart_center), np.array([0.4, 1.3]))


class TestTorusAverage:
    @pytest.mark.parametrize("pert_name", ["q1", "h1_squared"])
    def test_hamiltonian_average_vanishes(self, pert_name):
        for model in (build_harmonic_family((1.0, 1.0), actions=(2.0, 2.0)), build_harmonic_family((1.0, 2.0, 0.5))):
            pert = build_perturbation(model, pert_name)
            grid = TorusGrid(n=model.n, m=16)
            for H in model.hamiltonians:
                value = torus_average(lambda x: omega_pairing(H, pert.field, x), model, model.chart_center, grid)
                assert abs(value) <= 1e-10

    def test_constant_integrand(self, r4_model):
        assert torus_average(lambda x: np.ones(x.shape[0]), r4_model, r4_model.chart_center, GRID2) == pytest.approx(1.0)

    def test_spectral_exactness(self):
        """e^{im·θ} の平均は 0 < |m_i| < m/2 で 0、m = 0 で 1"""
        grid = TorusGrid(n=2, m=16)
        theta = grid.angles()
        for m1 in range(-7, 8):
            for m2 in range(-7, 8):
                phase = m1 * theta[:, 0] + m2 * theta[:, 1]
                expected = 1.0 if m1 == m2 == 0 else 0.0
                assert grid.average(np.cos(phase)) == pytest.approx(expected, abs=1e-12)
                assert grid.average(np.sin(phase)) == pytest.approx(0.0, abs=1e-12)

    def test_k1_pairing_average_matches_dense_quadrature(self, r4_model, k1):
        """ω(X_{G₂}, K₁) = cos²θ₂ の平均 0.5 を scipy の適応求積と突き合わせる"""
        _, G2 = r4_model.hamiltonians
        a = r4_model.chart_center + np.array([0.1, -0.2])
        value = torus_average(lambda x: omega_pairing(G2, k1.field, x), r4_model, a, TorusGrid(n=2, m=16))
        assert value == pytest.approx(0.5, abs=1e-12)

        I = r4_model.actions_for_level(a)

        def integrand(theta2: float) -> float:
            x = r4_model.from_action_angle(I, np.array([0.7, theta2]))
            return float(omega_pairing(G2, k1.field, x))

        dense, _ = integrate.quad(integrand, 0.0, 2 * np.pi, epsabs=1e-12, limit=200)
        assert value == pytest.approx(dense / (2 * np.pi), abs=1e-10)


class TestAveragedODE:
    def test_k1_rhs(self, r4_model, k1):
        ode = averaged_rhs(r4_model, k1, GRID2)
        np.testing.assert_allclose(ode.rhs(r4_model.chart_center), [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(ode.rhs(r4_model.chart_center + [0.2, -0.1]), [0.5, 0.5], atol=1e-12)

    def test_k1_path_and_exit_time(self, r4_model, k1):
        """H̄(t) = H(0) + (t/2)(1, 1)。r = 1/√2、速さ 1/√2 なので T⁰ = 1。"""
        ode = averaged_rhs(r4_model, k1, GRID2)
        path = solve_averaged_ode(ode, 2.0, 0.01)
        assert path.exited
        assert path.exit_time == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(path.at(0.5), r4_model.chart_center + 0.25, atol=1e-12)
        np.testing.assert_allclose(path.at(5.0), path.values[-1])

    def test_linear_rhs_matches_rk4(self):
        ode = AveragedODE(rhs=lambda a: -a, initial=np.array([1.0]), center=np.array([0.0]), radius=10.0)
        path = solve_averaged_ode(ode, 1.0, 0.01)
        assert not path.exited
        assert path.values[-1, 0] == pytest.approx(np.exp(-1.0), rel=1e-9)

    def test_first_passage(self, r4_model, k1):
        path = solve_averaged_ode(averaged_rhs(r4_model, k1, GRID2), 2.0, 0.01)
        t = path.first_passage(r4_model.chart_center, 0.5 * r4_model.chart_radius)
        assert t == pytest.approx(0.5, abs=1e-9)


class TestRateFit:
    def test_power_law(self):
        eps = np.array([0.1, 0.05, 0.025, 0.0125])
        slope, intercept, ci = fit_rate(eps, 3.0 * eps**0.5)
        assert slope == pytest.approx(0.5)
        assert intercept == pytest.approx(np.log(3.0))
        assert ci[0] <= slope <= ci[1]

    def test_nonpositive_error(self):
        slope, _, ci = fit_rate([0.1, 0.05, 0.025], [0.1, 0.0, 0.02])
        assert np.isnan(slope) and np.isnan(ci[0])

    def test_epsilon_grid_checks(self):
        with pytest.raises(ExperimentError):
            check_epsilons([0.05, 0.1])
        with pytest.raises(ExperimentError):
            check_epsilons([0.1, -0.05])

    def test_rate_needs_paths(self, r4_model, k1):
        with pytest.raises(ExperimentError):
            rate_experiment(r4_model, k1, _y0(r4_model), 0.5, 2.0, [0.1, 0.05], 10, SEED)

    def test_rate_horizon_before_exit(self, r4_model, k1):
        with pytest.raises(ExperimentError):
            rate_experiment(r4_model, k1, _y0(r4_model), 1.5, 2.0, [0.1, 0.05], 100, SEED, grid=GRID2)


@pytest.fixture(scope="module")
def k1_rate():
    """ε ∈ {0.2, 0.1, 0.05}、100 本の小さな rate 実行（傾き帯域と seed 比較で共有）"""
    model, perts = build_r4_example(actions=(2.0, 2.0))
    result = rate_experiment(
        model, perts[0], _y0(model), 0.5, 2.0, [0.2, 0.1, 0.05], 100, SEED,
        grid=GRID2, dt_max=1e-2, dt_scale=1.0,
    )
    return model, perts[0], result


class TestFastRate:
    def test_zero_perturbation_errors_vanish(self, r4_model):
        """K ≡ 0 では H は保存され H̄ も定数"""
        pert = build_perturbation(r4_model, "zero")
        result = rate_experiment(
            r4_model, pert, _y0(r4_model), 0.5, 2.0, [0.2, 0.1], 100, SEED,
            grid=TorusGrid(n=2, m=16), dt_max=1e-2, dt_scale=1.0,
        )
        assert np.all(result.errors <= 1e-3)

    def test_k1_slope_within_band(self, k1_rate):
        _, _, result = k1_rate
        assert result.fitted
        assert np.all(np.isfinite(result.errors))
        assert result.within_band()

    def test_band_rejects_steep_slope(self):
        eps = np.array([0.2, 0.1, 0.05])
        slope, intercept, ci = fit_rate(eps, eps**1.5)
        result = RateFitResult(
            epsilons=eps, errors=eps**1.5, stderrs=np.zeros(3), n_paths=np.full(3, 100), beta=2.0,
            slope=slope, intercept=intercept, slope_ci=ci,
        )
        assert slope == pytest.approx(1.5)
        assert not result.within_band()

    def test_errors_stable_across_master_seed(self, k1_rate):
        model, pert, base = k1_rate
        other = rate_experiment(
            model, pert, _y0(model), 0.5, 2.0, [0.2, 0.1, 0.05], 100, SEED + 1,
            grid=GRID2, dt_max=1e-2, dt_scale=1.0,
        )
        assert not np.array_equal(base.errors, other.errors)
        tol = 3.0 * np.hypot(base.stderrs, other.stderrs)
        assert np.all(np.abs(base.errors - other.errors) <= tol)


class TestExitProbability:
    def test_zero_perturbation_never_reaches_t_delta(self, r4_model):
        pert = build_perturbation(r4_model, "zero")
        table = exit_probability_experiment(
            r4_model, pert, _y0(r4_model), None, 0.1, [0.1, 0.05], 10, SEED, horizon=2.0, grid=GRID2
        )
        assert "t_delta_infinite:not_applicable" in table.flags
        np.testing.assert_array_equal(table.probabilities, 0.0)

    def test_exit_ball_is_centered_on_initial_level(self, r4_model, k1):
        """チャート中心が H(y₀) からずれていても、T_δ と脱出判定は同じ H(y₀) 中心の球で測る"""
        shifted = r4_model.with_chart(center=r4_model.chart_center + np.array([0.1, 0.0]))
        kwargs = dict(horizon=2.0, grid=GRID2, dt_max=1e-2, dt_scale=1.0)
        delta = r4_model.chart_radius / 4
        base = exit_probability_experiment(r4_model, k1, _y0(r4_model), None, delta, [0.2], 20, SEED, **kwargs)
        moved = exit_probability_experiment(shifted, k1, _y0(r4_model), None, delta, [0.2], 20, SEED, **kwargs)
        assert np.isfinite(base.t_delta)
        assert moved.t_delta == base.t_delta
        assert moved.radius == base.radius == pytest.approx(r4_model.chart_radius)
        np.testing.assert_array_equal(moved.probabilities, base.probabilities)

    def test_delta_must_be_below_radius(self, r4_model, k1):
        with pytest.raises(ExperimentError):
            exit_probability_experiment(r4_model, k1, _y0(r4_model), None, 5.0, [0.1], 10, SEED)


class TestDeviation:
    def test_zero_epsilon_limit_shrinks(self, r4_model, k1):
        table = deviation_experiment(r4_model, k1, _y0(r4_model), [0.05, 0.1], [0.2, 0.1], 16, SEED, dt=1e-2)
        assert table.means.shape == (2, 2)
        assert np.all(np.diff(table.means, axis=1) >= 0)  # sup は時間について単調
        assert np.all(table.means[1] < table.means[0])

    def test_times_must_be_multiples(self, r4_model, k1):
        with pytest.raises(ExperimentError):
            deviation_experiment(r4_model, k1, _y0(r4_model), [0.015], [0.1], 4, SEED, dt=1e-2)


@pytest.mark.slow
class TestAcceptance:
    def test_first_scaling_rate(self, r4_model, k1):
        result = rate_experiment(
            r4_model, k1, _y0(r4_model), 0.5, 2.0, [0.1, 0.05, 0.025, 0.0125], 200, SEED, grid=GRID2
        )
        assert np.all(np.diff(result.errors) < 0)
        assert result.slope >= 0.25 - 0.5 * (result.slope_ci[1] - result.slope_ci[0])

    def test_deviation_scales_linearly(self, r4_model, k1):
        table = deviation_experiment(r4_model, k1, _y0(r4_model), [1.0], [0.1, 0.05], 500, SEED, dt=1e-3)
        assert table.means[0, 0] / table.means[1, 0] == pytest.approx(2.0, rel=0.2)

    def test_exit_probability_non_increasing(self, r4_model, k1):
        table = exit_probability_experiment(
            r4_model, k1, _y0(r4_model), None, r4_model.chart_radius / 4, [0.1, 0.05, 0.025], 400, SEED,
            horizon=2.0, grid=GRID2,
        )
        assert np.isfinite(table.t_delta)
        tol = 2.0 * np.max(table.stderrs)
        assert np.all(np.diff(table.probabilities) <= tol)
