"""
モデルライブラリのテスト
"""
import numpy as np
import pytest

from app.models.errors import ChartError, LabError
from app.services.model_library import (
    build_harmonic_family,
    build_model,
    build_perturbation,
    frequency_matrix_fd,
    list_models,
    rebuild_model,
)
from app.services.symplectic import omega_pairing, poisson_bracket


class TestHarmonicFamily:
    def test_chart_roundtrip(self, rng):
        model = build_harmonic_family((1.0, 2.5, 0.7))
        I = rng.uniform(0.5, 3.0, size=(20, 3))
        theta = rng.uniform(0.0, 2 * np.pi, size=(20, 3))
        x = model.from_action_angle(I, theta)
        I_back, theta_back = model.to_action_angle(x)
        np.testing.assert_allclose(I_back, I, rtol=1e-12)
        np.testing.assert_allclose(np.exp(1j * theta_back), np.exp(1j * theta), atol=1e-12)

    def test_energies_depend_on_actions_only(self, rng):
        model = build_harmonic_family((1.0, 2.0))
        I = np.array([1.3, 0.4])
        pts = model.fiber_points(I, rng.uniform(0.0, 2 * np.pi, size=(15, 2)))
        np.testing.assert_allclose(model.energies(pts), np.tile(model.energy_of_actions(I), (15, 1)))

    def test_family_commutes(self, rng):
        model = build_harmonic_family((1.0, 2.0, 3.0))
        x = rng.standard_normal((25, 6))
        for F in model.hamiltonians:
            for G in model.hamiltonians:
                np.testing.assert_allclose(poisson_bracket(F, G, x), 0.0, atol=1e-12)

    def test_frequency_matrix_matches_differences(self):
        model = build_harmonic_family((1.5, 0.5))
        I = np.array([0.8, 1.7])
        np.testing.assert_allclose(model.freq_matrix(I), frequency_matrix_fd(model, I), atol=1e-8)

    def test_actions_for_level_inverts(self):
        model = build_harmonic_family((1.0, 2.0))
        I = np.array([0.6, 1.1])
        np.testing.assert_allclose(model.actions_for_level(model.energy_of_actions(I)), I, rtol=1e-12)

    def test_level_beyond_critical_set(self):
        model = build_harmonic_family((1.0, 1.0))
        with pytest.raises(ChartError):
            model.actions_for_level(np.array([1.0, 2.0]))  # I₁ = −1

    def test_rejects_nonpositive_frequency(self):
        with pytest.raises(LabError):
            build_harmonic_family((1.0, 0.0))


class TestR4Example:
    def test_chart_ball(self, r4_model):
        np.testing.assert_allclose(r4_model.chart_center, [4.0, 2.0])
        assert r4_model.chart_radius == pytest.approx(1.0 / np.sqrt(2.0))
        np.testing.assert_allclose(r4_model.freq_matrix(np.ones(2)), [[1.0, 1.0], [0.0, 1.0]])

    def test_k1_pairings(self, r4_model, k1, rng):
        """dH₁(K₁) = dH₂(K₁) = q₂²/(q₂²+p₂²)"""
        x = rng.standard_normal((20, 4))
        expected = x[:, 1] ** 2 / (x[:, 1] ** 2 + x[:, 3] ** 2)
        for H in r4_model.hamiltonians:
            np.testing.assert_allclose(np.sum(H.grad(x) * k1.field(x), axis=-1), expected)

    def test_unverified_fields_flagged(self, r4):
        _, (K1, K2, K3) = r4
        assert not K1.unverified_hamiltonian
        assert K2.unverified_hamiltonian and K3.unverified_hamiltonian

    def test_require_in_chart(self, r4_model):
        with pytest.raises(ChartError):
            r4_model.require_in_chart(r4_model.from_action_angle(np.array([3.0, 3.0]), np.zeros(2)))

    def test_action_angle_of_literal_point(self, r4_model):
        I, theta = r4_model.to_action_angle(np.array([np.sqrt(2.0), 0.0, 0.0, np.sqrt(2.0)]))
        np.testing.assert_allclose(I, [1.0, 1.0])
        np.testing.assert_allclose(theta, [0.0, np.pi / 2])

    def test_frequency_matrix_determinant(self, r4_model):
        assert np.linalg.det(r4_model.freq_matrix(np.array([1.0, 1.0]))) == pytest.approx(1.0)


class TestOneDofCase:
    def test_pairing_is_minus_p(self, one_dof, rng):
        """ω(X_H, K) = dH(K) = −p"""
        model, pert = one_dof
        x = rng.standard_normal((20, 2))
        np.testing.assert_allclose(omega_pairing(model.hamiltonians[0], pert.field, x), -x[:, 1])

    def test_polar_chart(self, one_dof):
        model, _ = one_dof
        I, theta = model.to_action_angle(np.array([0.0, 2.0]))
        assert I[0] == pytest.approx(2.0)
        assert theta[0] == pytest.approx(np.pi / 2)


class TestRegistry:
    def test_build_model_names(self):
        assert build_model("r4").n == 2
        assert build_model("1dof").n == 1
        assert build_model("harmonic", (1.0, 2.0, 3.0)).n == 3

    def test_unknown_model(self):
        with pytest.raises(LabError):
            build_model("pendulum")

    def test_r4_perturbation_needs_r4(self, one_dof):
        model, _ = one_dof
        with pytest.raises(LabError):
            build_perturbation(model, "K1")

    def test_constant_perturbation_has_zero_field(self, r4_model, rng):
        pert = build_perturbation(r4_model, "constant")
        assert pert.is_hamiltonian
        np.testing.assert_array_equal(pert.field(rng.standard_normal((5, 4))), 0.0)

    def test_rebuild_keeps_chart(self, r4_model):
        moved = r4_model.with_chart(center=[4.1, 2.0], radius=0.3)
        again = rebuild_model(moved.spec)
        np.testing.assert_allclose(again.chart_center, [4.1, 2.0])
        assert again.chart_radius == pytest.approx(0.3)

    def test_list_models(self):
        assert {m["name"] for m in list_models()} == {"harmonic", "r4", "1dof"}
