import math

import numpy as np
import pytest
from scipy import stats

from robustcd.cd import CDError, ConfidenceCurve, ConfidenceDistribution, normal_cd
from robustcd.mest import EstimatingFunction, godambe, solve
from robustcd.models import DatasetSpec, OneSampleModel, TwoSampleModel, sample
from robustcd.pivots import cd_from_pivot
from robustcd.rng import derive_rng
from robustcd.simcd import AbcConfig, ProposalSpec, SummaryStatistic, abc_cd, sig_cd

MEAN_EF = EstimatingFunction("ml_score", "one_sample", known_scale=1.0)


def observed_one_sample(seed=7, n=25, loc=0.3):
    return loc + derive_rng(seed, "obs").standard_normal(n)


class TestAbcCd:
    def test_accept_all_gives_uniform(self):
        y = observed_one_sample()
        model = OneSampleModel(theta=0.0, n=y.size)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=40_000)
        cfg = AbcConfig(epsilon=1e9, seed=1, distance="absolute")
        dens = abc_cd(model, prop, SummaryStatistic("m_estimator"), cfg, y, ef=MEAN_EF)
        assert dens.diagnostics["n_accepted"] == 40_000
        ks = stats.kstest(dens.sample, stats.uniform(loc=-2, scale=4).cdf).statistic
        assert ks < 0.01

    def test_matches_wald_cd_oracle(self):
        # normal mean, known scale, mean summary: accepted draws follow the
        # closed-form Wald confidence density
        y = observed_one_sample(n=25)
        model = OneSampleModel(theta=0.0, n=25)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=100_000)
        cfg = AbcConfig(epsilon=0.02, seed=2, distance="absolute")
        dens = abc_cd(model, prop, SummaryStatistic("m_estimator"), cfg, y, ef=MEAN_EF)
        wald = normal_cd(float(np.mean(y)), 1.0 / math.sqrt(25))
        ks = stats.kstest(dens.sample, lambda x: np.atleast_1d(wald.evaluate(x))).statistic
        assert ks < 0.05

    def test_determinism(self):
        y = observed_one_sample()
        model = OneSampleModel(theta=0.0, n=y.size)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=5000)
        cfg = AbcConfig(epsilon=0.1, seed=11)
        a = abc_cd(model, prop, SummaryStatistic("m_estimator"), cfg, y, ef=MEAN_EF)
        b = abc_cd(model, prop, SummaryStatistic("m_estimator"), cfg, y, ef=MEAN_EF)
        assert np.array_equal(a.sample, b.sample)

    def test_acceptance_nested_in_epsilon(self):
        y = observed_one_sample()
        model = OneSampleModel(theta=0.0, n=y.size)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=5000)
        accepted = {}
        for eps in (0.05, 0.1, 0.2):
            cfg = AbcConfig(epsilon=eps, seed=11, distance="absolute")
            dens = abc_cd(model, prop, SummaryStatistic("m_estimator"), cfg, y, ef=MEAN_EF)
            accepted[eps] = set(np.round(dens.sample, 12))
        assert accepted[0.05] <= accepted[0.1] <= accepted[0.2]

    def test_zero_acceptance_error_reports_distance(self):
        y = observed_one_sample()
        model = OneSampleModel(theta=0.0, n=y.size)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=500)
        cfg = AbcConfig(epsilon=1e-9, seed=3, distance="absolute")
        with pytest.raises(CDError, match="min distance"):
            abc_cd(model, prop, SummaryStatistic("m_estimator"), cfg, y, ef=MEAN_EF)

    def test_two_sample_median_summary(self):
        model = TwoSampleModel(mu_n=120.0, psi=2.6, sigma=4.0, n_per_group=20)
        data = sample(DatasetSpec(model=model, seed=5))
        prop = ProposalSpec(psi_range=(-3.0, 9.0),
                            nuisance_ranges=((110.0, 130.0), (1.0, 8.0)), r=40_000)
        cfg = AbcConfig(epsilon=0.1, seed=5)
        dens = abc_cd(model, prop, SummaryStatistic("median_difference"), cfg, data)
        med_diff = float(np.median(data.y_s) - np.median(data.y_n))
        cd = ConfidenceDistribution.from_sample(dens.sample)
        assert cd.median() == pytest.approx(med_diff, abs=1.5)
        assert dens.diagnostics["pilot_scale"] > 0


class TestSigCd:
    def test_closed_form_acceptance_probability(self):
        # normal mean with mean summary: C(psi) = Phi((psi - ybar) sqrt(n))
        y = observed_one_sample(seed=3, n=25)
        model = OneSampleModel(theta=0.0, n=25)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=100_000)
        cd = sig_cd(model, prop, SummaryStatistic("m_estimator"), y, seed=4, ef=MEAN_EF)
        assert isinstance(cd, ConfidenceDistribution)
        ybar = float(np.mean(y))
        for psi in (-0.5, 0.0, ybar, 0.6, 1.0):
            expect = stats.norm.cdf((psi - ybar) * 5.0)
            assert cd.evaluate(psi) == pytest.approx(expect, abs=0.03)

    def test_endpoint_acceptance_rates(self):
        y = observed_one_sample(seed=3, n=25)
        model = OneSampleModel(theta=0.0, n=25)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=50_000)
        cd = sig_cd(model, prop, SummaryStatistic("m_estimator"), y, seed=4, ef=MEAN_EF)
        assert cd.evaluate(-1.8) < 0.01
        assert cd.evaluate(1.8) > 0.99

    def test_median_close_to_estimate(self):
        model = TwoSampleModel(mu_n=120.0, psi=2.6, sigma=4.0, n_per_group=20)
        data = sample(DatasetSpec(model=model, seed=6))
        prop = ProposalSpec(psi_range=(-3.0, 9.0),
                            nuisance_ranges=((110.0, 130.0), (1.0, 8.0)), r=60_000)
        ef = EstimatingFunction("huber_location", "two_sample")
        cd = sig_cd(model, prop, SummaryStatistic("m_estimator"), data, seed=6, ef=ef)
        psi_tilde = solve(ef, data).psi
        se = math.sqrt(godambe(ef, data, solve(ef, data)).v_psi_psi)
        assert cd.median() == pytest.approx(psi_tilde, abs=0.5 * se)

    def test_values_form_valid_cd(self):
        y = observed_one_sample(seed=9, n=30)
        model = OneSampleModel(theta=0.0, n=30)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=20_000)
        cd = sig_cd(model, prop, SummaryStatistic("m_estimator"), y, seed=9, ef=MEAN_EF)
        assert np.all(cd.grid_c >= 0) and np.all(cd.grid_c <= 1)
        assert np.all(np.diff(cd.grid_c) >= 0)
        assert cd.diagnostics["monotone"]

    def test_non_monotone_profile_returns_curve(self):
        # a summary with no information about the parameter gives a flat,
        # noisy acceptance profile that cannot be a proper CD
        y = observed_one_sample(seed=10, n=20)
        model = OneSampleModel(theta=0.0, n=20)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=3000)

        from robustcd.simcd import _sig_from_summaries

        rng = derive_rng(10, "noise")
        psis = rng.uniform(-2, 2, 3000)
        t_star = rng.standard_normal(3000)  # pure noise summary
        result = _sig_from_summaries(psis, t_star, np.ones(3000, bool), 0.0, (-2.0, 2.0))
        assert isinstance(result, ConfidenceCurve)
        assert result.source == "acceptance_profile"
        assert not result.diagnostics["monotone"]


class TestAsymptoticAgreement:
    def test_profile_ee_matches_wald_at_large_n(self):
        # n = 400 total: simulated CD with the profile-equation summary agrees
        # with the closed-form robust Wald CD
        model = TwoSampleModel(mu_n=120.0, psi=2.6, sigma=4.0, n_per_group=200)
        data = sample(DatasetSpec(model=model, seed=21))
        ef = EstimatingFunction("huber_location", "two_sample")
        point = solve(ef, data)
        gd = godambe(ef, data, point)
        wald = cd_from_pivot("wald_robust", ef, data)
        prop = ProposalSpec(psi_range=(point.psi - 3, point.psi + 3),
                            nuisance_ranges=((118.0, 122.0), (2.0, 7.0)), r=60_000)
        cfg = AbcConfig(epsilon=0.05, seed=21)
        dens = abc_cd(model, prop, SummaryStatistic("profile_estimating_equation"),
                      cfg, data, ef=ef)
        sim_cd = ConfidenceDistribution.from_sample(dens.sample)
        assert abs(sim_cd.median() - wald.median()) <= 0.5 * gd.se_psi
        w_sim = np.diff(sim_cd.interval(0.90))[0]
        w_wald = np.diff(wald.interval(0.90))[0]
        assert abs(w_sim - w_wald) / w_wald <= 0.15


class TestValidation:
    def test_proposal_validation(self):
        with pytest.raises(ValueError):
            ProposalSpec(psi_range=(1.0, 1.0), r=10)
        with pytest.raises(ValueError):
            ProposalSpec(psi_range=(0.0, 1.0), r=0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AbcConfig(epsilon=0.0, seed=1)
        with pytest.raises(ValueError):
            AbcConfig(epsilon=0.1, seed=1, distance="cosine")
        with pytest.raises(ValueError):
            SummaryStatistic("mean")

    def test_median_summary_needs_two_samples(self):
        y = observed_one_sample()
        model = OneSampleModel(theta=0.0, n=y.size)
        prop = ProposalSpec(psi_range=(-2.0, 2.0), r=100)
        cfg = AbcConfig(epsilon=1.0, seed=1)
        with pytest.raises(ValueError, match="two-sample"):
            abc_cd(model, prop, SummaryStatistic("median_difference"), cfg, y)
