import numpy as np
import pytest

from ivcond.exceptions import InconsistentScale, NegativeVariance
from ivcond.inference import InferenceResult
from ivcond.iv_core import IVData, sigma_hat_plugin, tsls_estimate
from ivcond.summary_data import (GramSummary, SummaryData, read_summary_csv,
                                 reconstruct_grams, summary_pipeline,
                                 summary_sigma_hat)


def orthogonal_design(n=5000, L=8, beta=0.5, n_invalid=2, alpha=3.0,
                      rho=None, seed=0):
    """Individual-level data whose instrument columns are exactly orthogonal
    and centered, so the summary reconstruction is exact."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n, L))
    raw -= raw.mean(axis=0)
    q, _ = np.linalg.qr(raw)
    z = q * np.sqrt(n) * rng.uniform(0.8, 1.3, L)
    a = np.zeros(L)
    a[:n_invalid] = alpha
    g = np.full(L, 1.0)
    # zero cross-covariance of the reduced-form errors
    rho = -beta if rho is None else rho
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    errs = rng.standard_normal((n, 2)) @ chol.T
    d = z @ g + errs[:, 1]
    y = z @ a + d * beta + errs[:, 0]
    return IVData(y, d, z)


def marginal_summaries(data):
    """Per-instrument OLS coefficients and standard errors."""
    n = data.n
    zz = np.sum(data.Z ** 2, axis=0)
    beta_y = data.Z.T @ data.Y / zz
    beta_d = data.Z.T @ data.D / zz
    se_y = np.sqrt((data.Y @ data.Y / zz - beta_y ** 2) / (n - 1))
    se_d = np.sqrt((data.D @ data.D / zz - beta_d ** 2) / (n - 1))
    return SummaryData(beta_y=beta_y, se_y=se_y, beta_d=beta_d, se_d=se_d,
                       n_eff=float(n))


class TestReconstruction:
    def test_round_trip_up_to_global_factor(self):
        data = orthogonal_design()
        summ = marginal_summaries(data)
        gs = reconstruct_grams(summ)
        true_zz = np.sum(data.Z ** 2, axis=0)
        ratios = np.concatenate([
            true_zz / gs.ztz_diag,
            (data.Z.T @ data.Y) / gs.zty,
            (data.Z.T @ data.D) / gs.ztd,
            [data.Y @ data.Y / gs.yty, data.D @ data.D / gs.dtd],
        ])
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-8)

    def test_identical_rows_give_identity_gram(self):
        summ = SummaryData(beta_y=[0.2] * 4, se_y=[0.01] * 4,
                           beta_d=[0.5] * 4, se_d=[0.02] * 4, n_eff=1000.0)
        gs = reconstruct_grams(summ)
        np.testing.assert_allclose(gs.ztz_diag, np.ones(4))

    def test_inconsistent_exposure_side_warns(self):
        summ = SummaryData(beta_y=[0.2, 0.2, 0.2], se_y=[0.01, 0.01, 0.01],
                           beta_d=[0.5, 0.5, 0.5], se_d=[0.02, 0.02, 0.2],
                           n_eff=1000.0)
        with pytest.warns(InconsistentScale):
            reconstruct_grams(summ)

    def test_validation(self):
        with pytest.raises(ValueError, match="at least 2"):
            SummaryData([0.1], [0.01], [0.2], [0.02], 100.0)
        with pytest.raises(ValueError, match="positive"):
            SummaryData([0.1, 0.2], [0.01, -0.01], [0.2, 0.1], [0.02, 0.02],
                        100.0)
        with pytest.raises(ValueError, match="n_eff"):
            SummaryData([0.1, 0.2], [0.01, 0.01], [0.2, 0.1], [0.02, 0.02], 2.0)

    def test_scaled_convention(self):
        data = orthogonal_design(n=800, L=3)
        gs = reconstruct_grams(marginal_summaries(data))
        g10 = gs.scaled(10.0)
        np.testing.assert_allclose(g10.ztz_diag, 10 * gs.ztz_diag)
        assert g10.c_convention == 10.0 * gs.c_convention


class TestSummarySigma:
    def test_round_trip_matches_plugin_covariance(self):
        data = orthogonal_design()
        summ = marginal_summaries(data)
        gs = reconstruct_grams(summ)
        est = tsls_estimate(gs.to_grams(), ())
        sig_sum = summary_sigma_hat(summ, gs, est)
        sig_ind = sigma_hat_plugin(data, ())
        factor = np.sum(data.Z[:, 0] ** 2) / gs.ztz_diag[0]
        scaled = sig_sum * factor / data.n * (data.n - data.L + 1)
        np.testing.assert_allclose(scaled, sig_ind, rtol=0.05, atol=0.02)

    def test_zero_effect_returns_reduced_form(self):
        data = orthogonal_design(n=600, L=3)
        summ = marginal_summaries(data)
        gs = reconstruct_grams(summ)
        sig = summary_sigma_hat(summ, gs, 0.0)
        assert sig[0, 1] == 0.0
        assert sig[0, 0] > 0 and sig[1, 1] > 0

    def test_doubling_c_doubles_sigma_not_estimate(self):
        data = orthogonal_design(n=600, L=3)
        summ = marginal_summaries(data)
        gs = reconstruct_grams(summ)
        est1 = tsls_estimate(gs.to_grams(), ())
        est2 = tsls_estimate(gs.scaled(4.0).to_grams(), ())
        assert est1 == est2  # power-of-two factor cancels exactly
        sig1 = summary_sigma_hat(summ, gs, est1)
        sig2 = summary_sigma_hat(summ, gs.scaled(2.0), est1)
        np.testing.assert_allclose(sig2, 2.0 * sig1, rtol=1e-12)

    def test_negative_variance_raises(self):
        gs = GramSummary(ztz_diag=np.ones(2), zty=np.array([3.0, 3.0]),
                         ztd=np.array([0.1, 0.1]), yty=1.0, dtd=5.0,
                         n_eff=100.0)
        with pytest.raises(NegativeVariance):
            gs.to_grams().sigma_hat(0.0)


class TestBitLevelInvariance:
    def test_estimate_bitwise_under_power_of_two_factor(self):
        data = orthogonal_design(n=700, L=4)
        gs = reconstruct_grams(marginal_summaries(data))
        a = tsls_estimate(gs.to_grams(), (0,))
        b = tsls_estimate(gs.scaled(4.0).to_grams(), (0,))
        assert a == b


class TestPipeline:
    def test_c_invariance_quick(self):
        from ivcond.sampler import SamplerConfig
        data = orthogonal_design(n=2000, L=6, n_invalid=2, alpha=3.0)
        summ = marginal_summaries(data)
        cfg = SamplerConfig(burnin=800, samples=2000, seed=3)
        res1 = summary_pipeline(summ, kind="tsls_est", null_value=0.4,
                                cfg=cfg, scale_factor=1.0)
        res10 = summary_pipeline(summ, kind="tsls_est", null_value=0.4,
                                 cfg=cfg, scale_factor=10.0)
        assert res1.diagnostics["selected"] == res10.diagnostics["selected"]
        assert res1.diagnostics["signs"] == res10.diagnostics["signs"]
        assert abs(res1.pvalue - res10.pvalue) < 1e-8
        assert res1.ci_lower == pytest.approx(res10.ci_lower, abs=1e-8)
        assert res1.ci_upper == pytest.approx(res10.ci_upper, abs=1e-8)

    def test_two_instrument_smallest_problem(self):
        from ivcond.exceptions import BracketNotFound, DegenerateWeights
        from ivcond.sampler import SamplerConfig
        data = orthogonal_design(n=400, L=2, n_invalid=1, alpha=4.0)
        summ = marginal_summaries(data)
        from ivcond.sisvive import TuningParams, default_lambda
        grams = reconstruct_grams(summ).to_grams()
        tuning = TuningParams(lam=0.25 * default_lambda(grams),
                              epsilon=0.01 * grams.ztz[0, 0] / grams.n)
        try:
            res = summary_pipeline(summ, tuning=tuning, kind="tsls_est",
                                   cfg=SamplerConfig(burnin=500, samples=1500,
                                                     seed=4))
        except (BracketNotFound, DegenerateWeights) as exc:
            # documented failure mode for the smallest legal problem
            assert str(exc)
            return
        assert np.isfinite(res.ci_lower) and np.isfinite(res.ci_upper)

    def test_result_is_inference_record(self):
        from ivcond.sampler import SamplerConfig
        data = orthogonal_design(n=900, L=4, n_invalid=1)
        res = summary_pipeline(marginal_summaries(data), kind="tsls_est",
                               cfg=SamplerConfig(burnin=500, samples=1200,
                                                 seed=5))
        assert isinstance(res, InferenceResult)
        assert "beta_tsls" in res.diagnostics


class TestCsv:
    def test_roundtrip(self, tmp_path):
        data = orthogonal_design(n=500, L=3)
        summ = marginal_summaries(data)
        path = tmp_path / "summ.csv"
        rows = ["snp,beta_exposure,se_exposure,beta_outcome,se_outcome"]
        for j in range(3):
            rows.append(f"rs{j}," + ",".join(repr(float(v)) for v in (
                summ.beta_d[j], summ.se_d[j], summ.beta_y[j], summ.se_y[j])))
        path.write_text("\n".join(rows), encoding="utf-8")
        loaded, names = read_summary_csv(path, 500.0)
        assert names == ["rs0", "rs1", "rs2"]
        np.testing.assert_allclose(loaded.beta_y, summ.beta_y)
        np.testing.assert_allclose(loaded.se_d, summ.se_d)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("snp,b,s,b2,s2\nrs1,1,1,1,1\n", encoding="utf-8")
        with pytest.raises(ValueError, match="header"):
            read_summary_csv(path, 100.0)


def test_ukbiobank_shape_pipeline_runs():
    """End-to-end run on summaries with the application's dimensions."""
    from ivcond.sampler import SamplerConfig
    rng = np.random.default_rng(315)
    L = 315
    n_eff = (336107 + 317756) / 2.0
    gamma = rng.uniform(0.02, 0.08, L)
    alpha = np.zeros(L)
    alpha[rng.choice(L, 12, replace=False)] = rng.normal(0.0, 0.05, 12)
    beta = 0.3
    var_y = 1.0
    se_d = np.sqrt(var_y / n_eff) * np.ones(L)
    se_y = np.sqrt(var_y / n_eff) * np.ones(L)
    beta_d = gamma + rng.normal(0, se_d)
    beta_y = alpha + beta * gamma + rng.normal(0, se_y)
    summ = SummaryData(beta_y=beta_y, se_y=se_y, beta_d=beta_d, se_d=se_d,
                       n_eff=n_eff)
    res = summary_pipeline(summ, kind="tsls_est",
                           cfg=SamplerConfig(burnin=300, samples=700, seed=7))
    assert np.isfinite(res.ci_lower) and np.isfinite(res.ci_upper)
    assert res.ci_lower < res.diagnostics["beta_tsls"] < res.ci_upper
