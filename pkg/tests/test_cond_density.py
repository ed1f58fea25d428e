import dataclasses

import numpy as np
import pytest

from ivcond.cond_density import (ar_quadratics, ar_statistic_from_intermediate,
                                 build_density, in_box, log_density,
                                 observed_statistic, reconstruct_omega)
from ivcond.iv_core import Grams, ar_statistic, tsls_estimate, tsls_statistic
from ivcond.sisvive import (RandomizationSpec, TuningParams,
                            omega_log_density, solve_randomized_sisvive)

from conftest import random_instance


@pytest.fixture(scope="module", params=["tsls_stat", "tsls_est", "ar_intermediate"])
def spec_kind(request):
    return request.param


def _spec(bench, kind, beta0=1.0):
    return build_density(bench["data"].grams, bench["sel"], beta0, kind)


class TestBuild:
    def test_empty_selection_constants(self):
        rng = np.random.default_rng(30)
        data = random_instance(rng, n=60, L=3, n_invalid=0, alpha=0.0)
        g = data.grams
        sel = solve_randomized_sisvive(g, TuningParams.default(g),
                                       omega=np.zeros(g.L + 1))
        tuning = sel.tuning
        assert sel.E == ()
        spec = build_density(g, sel, 0.5, "tsls_stat")
        assert spec.n_inactive == g.L
        assert spec.log_jacobian == pytest.approx(
            np.log(g.dpd + tuning.epsilon) + g.L * np.log(tuning.lam))
        # box constrains only the subgradient cube
        assert in_box(spec, 12.3, np.empty(0), np.full(g.L, 0.99))
        assert not in_box(spec, 0.0, np.empty(0), np.full(g.L, 1.01))

    def test_benchmark_spec_is_sound(self, bench, spec_kind):
        spec = _spec(bench, spec_kind)
        assert np.isfinite(np.linalg.cond(spec.k2))
        assert np.all(np.linalg.eigvalsh(spec.k2) > 0)
        np.testing.assert_allclose(spec.k2, spec.k2.T)
        ld = log_density(spec, *spec.initial_values())
        assert np.isfinite(ld)

    def test_jacobian_matches_generic_determinant(self):
        rng = np.random.default_rng(31)
        data = random_instance(rng, n=50, L=2, n_invalid=1, alpha=6.0)
        g = data.grams
        sel = solve_randomized_sisvive(g, rand=RandomizationSpec(seed=4))
        assert len(sel.E) == 1
        spec = build_density(g, sel, 0.0, "tsls_stat")
        j = sel.E[0]
        block = np.array([[g.dpd, g.ztd[j]], [g.ztd[j], g.ztz[j, j]]])
        direct = np.linalg.det(block + sel.tuning.epsilon * np.eye(2)) \
            * sel.tuning.lam ** (g.L - 1)
        assert spec.log_jacobian == pytest.approx(np.log(direct), rel=1e-10)

    def test_k2_is_gram_plus_ridge(self, bench):
        g = bench["data"].grams
        spec = _spec(bench, "tsls_stat")
        np.testing.assert_allclose(np.diag(spec.k2)[:g.L],
                                   np.diag(g.ztz) + spec.epsilon)
        assert spec.k2[g.L, g.L] == pytest.approx(g.dpd + spec.epsilon)
        np.testing.assert_allclose(spec.k2[:g.L, g.L], g.ztd)

    def test_tsls_stat_unit_variance(self, bench):
        spec = _spec(bench, "tsls_stat")
        np.testing.assert_array_equal(spec.var_t, [1.0])
        np.testing.assert_array_equal(spec.mu_t, [0.0])

    def test_tsls_est_centers_at_null(self, bench):
        spec = _spec(bench, "tsls_est", beta0=0.77)
        assert spec.mu_t[0] == 0.77
        assert spec.t_obs[0] == pytest.approx(
            tsls_estimate(bench["data"], bench["sel"].E))

    def test_ar_rank_is_l_minus_e(self, bench):
        spec = _spec(bench, "ar_intermediate")
        n_e = len(bench["sel"].E)
        assert spec.t_dim == bench["data"].L - n_e
        assert np.all(spec.var_t > 0)
        # basis diagonalizes Z'(I - P_E)Z with the stored variances
        g = bench["data"].grams
        m = g.ztz - g.subset(bench["sel"].E).zpez
        prod = spec.basis.T @ m @ spec.basis * spec.sigma11
        np.testing.assert_allclose(prod, np.diag(spec.var_t), atol=1e-6)

    def test_unknown_kind_rejected(self, bench):
        with pytest.raises(ValueError):
            build_density(bench["data"].grams, bench["sel"], 0.0, "wilks")


class TestLogDensity:
    def test_sign_violation_is_minus_inf(self, bench, spec_kind):
        spec = _spec(bench, spec_kind)
        t, beta, alpha_e, u = spec.initial_values()
        alpha_e[0] = -alpha_e[0]
        assert log_density(spec, t, beta, alpha_e, u) == -np.inf

    def test_subgradient_outside_cube_is_minus_inf(self, bench, spec_kind):
        spec = _spec(bench, spec_kind)
        t, beta, alpha_e, u = spec.initial_values()
        u[0] = 1.2
        assert log_density(spec, t, beta, alpha_e, u) == -np.inf

    def test_initializer_reproduces_drawn_randomization(self, bench, spec_kind):
        sel = bench["sel"]
        spec = _spec(bench, spec_kind)
        w = reconstruct_omega(spec, *spec.initial_values())
        assert np.max(np.abs(w - sel.omega)) < 1e-6 * sel.tuning.lam
        t, beta, alpha_e, u = spec.initial_values()
        gauss = np.sum(-0.5 * (t - spec.mu_t) ** 2 / spec.var_t
                       - 0.5 * np.log(2 * np.pi * spec.var_t))
        direct = gauss + omega_log_density(sel.family, sel.omega_scale, sel.omega) \
            + spec.log_jacobian
        assert log_density(spec, t, beta, alpha_e, u) == pytest.approx(
            direct, abs=1e-4)

    def test_doubling_lambda_shifts_jacobian(self, bench, spec_kind):
        sel = bench["sel"]
        sel2 = dataclasses.replace(
            sel, tuning=TuningParams(sel.tuning.lam * 2.0, sel.tuning.epsilon))
        spec = _spec(bench, spec_kind)
        spec2 = build_density(bench["data"].grams, sel2, 1.0, spec_kind)
        shift = spec2.log_jacobian - spec.log_jacobian
        assert shift == pytest.approx(
            (bench["data"].L - len(sel.E)) * np.log(2.0), abs=1e-10)


class TestSufficientStatistic:
    def test_decomposition_constant_across_states(self, bench, spec_kind):
        # S = K3 + Sigma_ST Sigma_T^+ t recovers the same K3 for any t
        spec = _spec(bench, spec_kind)
        rng = np.random.default_rng(32)
        for _ in range(5):
            t = spec.t_obs + rng.standard_normal(spec.t_dim)
            s = spec.k3 + (-spec.k1) @ t
            np.testing.assert_allclose(s - (-spec.k1) @ t, spec.k3, rtol=1e-12)

    def test_k3_couples_s_obs_to_observed_statistic(self, bench, spec_kind):
        spec = _spec(bench, spec_kind)
        np.testing.assert_allclose(spec.k3, spec.s_obs + spec.k1 @ spec.t_obs,
                                   rtol=1e-9)


class TestArIntermediate:
    def test_zero_vector_maps_to_zero(self, bench):
        spec = _spec(bench, "ar_intermediate")
        val = ar_statistic_from_intermediate(
            spec, np.zeros(bench["data"].L), bench["data"].grams)
        assert val == 0.0

    def test_observed_vector_recovers_ar_statistic(self, bench):
        g = bench["data"].grams
        sel = bench["sel"]
        spec = build_density(g, sel, 0.9, "ar_intermediate")
        sub = g.subset(sel.E)
        t_tilde = (g.zty - 0.9 * g.ztd) - (sub.zpey - 0.9 * sub.zped)
        val = ar_statistic_from_intermediate(spec, t_tilde, g)
        assert val == pytest.approx(ar_statistic(g, sel.E, 0.9), rel=1e-9)

    def test_unit_vector_identity_gram(self):
        # handmade grams with identity Z'Z make the quadratic form explicit
        g = Grams.from_arrays(n=50, ztz=np.eye(2), zty=[0.5, 0.2],
                              ztd=[0.4, 0.3], yty=30.0, dtd=20.0, ytd=5.0)
        tuning = TuningParams(lam=3.0, epsilon=0.01)
        sel = solve_randomized_sisvive(g, tuning, omega=np.zeros(3))
        assert sel.E == ()
        spec = build_density(g, sel, 0.0, "ar_intermediate")
        resid = g.residual_quad(0.0) / (g.n - g.L)
        val = ar_statistic_from_intermediate(spec, np.array([1.0, 0.0]), g)
        assert val == pytest.approx((1.0 / g.L) / resid, rel=1e-12)

    def test_null_space_moves_excluded_from_sampling(self, bench):
        # mapping a full vector through the reduced basis kills any component
        # outside the rank subspace, so the density cannot see it
        g = bench["data"].grams
        sel = bench["sel"]
        spec = _spec(bench, "ar_intermediate")
        m = g.ztz - g.subset(sel.E).zpez
        eigvals, eigvecs = np.linalg.eigh(0.5 * (m + m.T))
        null_vec = eigvecs[:, 0]  # |E| zero eigenvalues sit first
        assert abs(eigvals[0]) < 1e-6 * eigvals[-1]
        t_full = spec.basis @ spec.t_obs
        np.testing.assert_allclose(spec.basis.T @ (t_full + 5.0 * null_vec),
                                   spec.basis.T @ t_full, atol=1e-8)

    def test_quadratics_match_statistic_mapping(self, bench):
        g = bench["data"].grams
        spec = _spec(bench, "ar_intermediate")
        rng = np.random.default_rng(33)
        t_red = rng.standard_normal((4, spec.t_dim)) * np.sqrt(spec.var_t)
        quads = ar_quadratics(spec, t_red, g)
        dof = g.L - len(spec.E)
        den = g.residual_quad(spec.beta0) / (g.n - g.L)
        for i in range(4):
            direct = ar_statistic_from_intermediate(spec, spec.basis @ t_red[i], g)
            assert quads[i] / dof / den == pytest.approx(direct, rel=1e-10)


class TestObservedStatistic:
    def test_dispatch(self, bench):
        g = bench["data"].grams
        E = bench["sel"].E
        assert observed_statistic(g, E, 0.3, "tsls_stat") == pytest.approx(
            tsls_statistic(g, E, 0.3))
        assert observed_statistic(g, E, 0.3, "tsls_est") == pytest.approx(
            tsls_estimate(g, E))
        assert observed_statistic(g, E, 0.3, "ar_intermediate") == pytest.approx(
            ar_statistic(g, E, 0.3))

