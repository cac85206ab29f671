import math

import numpy as np
import pytest
from scipy import stats

from robustcd.mest import EstimatingFunction, godambe, solve
from robustcd.models import ContaminationRecipe, DatasetSpec, TwoSampleModel, sample
from robustcd.pivots import (
    PIVOT_KINDS,
    PivotError,
    cd_from_pivot,
    classical_t_cd,
    confidence_density_from_pivot,
    export_plot_data,
    null_distribution,
    pivot_value,
    tail_area_influence,
)
from robustcd.rng import derive_rng


def trial_data(seed=42, n_per_group=20, contaminated=False):
    recipe = ContaminationRecipe(fraction=0.10) if contaminated else None
    model = TwoSampleModel(mu_n=120.0, psi=2.6, sigma=4.0, n_per_group=n_per_group)
    return sample(DatasetSpec(model=model, seed=seed, contamination=recipe))


HUBER = EstimatingFunction("huber_location", "two_sample")
ML = EstimatingFunction("ml_score", "two_sample")


class TestPivotValue:
    def test_zero_at_estimate(self):
        data = trial_data()
        for ef, kinds in ((ML, PIVOT_KINDS),
                          (HUBER, ("wald_robust", "score_robust", "ratio_robust_adj",
                                   "root_robust"))):
            psi_tilde = solve(ef, data).psi
            for kind in kinds:
                assert pivot_value(kind, ef, data, psi_tilde) == pytest.approx(0.0, abs=1e-5)

    def test_wald_robust_reduces_to_observed_information(self):
        # information identity: at the ml fit the sandwich variance of the
        # interest block equals the observed-information variance exactly,
        # so the robust Wald pivot reduces to the classical one up to the
        # finite-sample scale convention
        data = trial_data()
        point = solve(ML, data)
        gd = godambe(ML, data, point)
        assert gd.v_psi_psi == pytest.approx(gd.k_psi_psi, rel=1e-10)
        n = data.n_total
        for psi in (0.0, 2.0, 5.0):
            w_r = pivot_value("wald_robust", ML, data, psi)
            w_obs = (point.psi - psi) / math.sqrt(gd.k_psi_psi)
            assert w_r == pytest.approx(w_obs, abs=1e-6)
            # wald_classic carries the pooled ddof-corrected scale
            w_c = pivot_value("wald_classic", ML, data, psi)
            assert w_c * math.sqrt(n / (n - 2)) == pytest.approx(w_obs, abs=1e-6)

    def test_ratio_nonnegative_and_root_sign(self):
        data = trial_data()
        psi_tilde = solve(HUBER, data).psi
        for psi in (psi_tilde - 2, psi_tilde - 0.3, psi_tilde + 0.7, psi_tilde + 3):
            w_adj = pivot_value("ratio_robust_adj", HUBER, data, psi)
            root = pivot_value("root_robust", HUBER, data, psi)
            assert w_adj >= 0
            assert math.copysign(1, root) == math.copysign(1, psi_tilde - psi)

    def test_median_has_no_ratio_pivot(self):
        data = trial_data()
        ef = EstimatingFunction("median_sign", "two_sample")
        with pytest.raises(PivotError, match="ratio-type pivot unavailable"):
            pivot_value("ratio_robust_adj", ef, data, 1.0)

    def test_classic_requires_ml(self):
        with pytest.raises(PivotError, match="ml_score"):
            pivot_value("wald_classic", HUBER, trial_data(), 1.0)

    def test_null_distribution_map(self):
        assert null_distribution("wald_robust") == "normal"
        assert null_distribution("score_robust") == "chi2_1"
        assert null_distribution("ratio_robust_adj") == "chi2_1"
        with pytest.raises(PivotError):
            null_distribution("nope")

    def test_score_pivot_closed_form_known_scale(self):
        # one-sample normal, known scale 1: the standardized profile score is
        # n (ybar - psi)^2 / s2_hat with s2_hat the empirical variance that
        # estimates the variability matrix at the fit
        rng = derive_rng(9, "score")
        y = rng.normal(1.0, 1.0, 50)
        ef = EstimatingFunction("ml_score", "one_sample", known_scale=1.0)
        psi0 = 0.6
        expect = y.size * (np.mean(y) - psi0) ** 2 / np.mean((y - np.mean(y)) ** 2)
        assert pivot_value("score_robust", ef, y, psi0) == pytest.approx(expect, rel=1e-8)


class TestCdFromPivot:
    def test_median_property(self):
        data = trial_data()
        psi_tilde = solve(HUBER, data).psi
        for kind in ("wald_robust", "root_robust", "score_robust", "ratio_robust_adj"):
            cd = cd_from_pivot(kind, HUBER, data)
            assert cd.evaluate(psi_tilde) == pytest.approx(0.5, abs=5e-3)

    def test_wald_and_root_agree_at_estimate(self):
        data = trial_data()
        psi_tilde = solve(HUBER, data).psi
        cw = cd_from_pivot("wald_robust", HUBER, data)
        cr = cd_from_pivot("root_robust", HUBER, data)
        assert cw.evaluate(psi_tilde) == pytest.approx(0.5, abs=1e-12)
        assert cr.evaluate(psi_tilde) == pytest.approx(0.5, abs=5e-3)

    def test_classic_wald_tracks_exact_t(self):
        data = trial_data(n_per_group=20)
        cw = cd_from_pivot("wald_classic", ML, data)
        ct = classical_t_cd(data)
        w_w = np.diff(cw.interval(0.95))[0]
        w_t = np.diff(ct.interval(0.95))[0]
        assert abs(w_w - w_t) / w_t < 0.05
        data_big = trial_data(n_per_group=200)
        w_w = np.diff(cd_from_pivot("wald_classic", ML, data_big).interval(0.95))[0]
        w_t = np.diff(classical_t_cd(data_big).interval(0.95))[0]
        assert abs(w_w - w_t) / w_t < 0.01

    def test_folding_identity_lrt(self):
        # chi2_1 CDF of W_p equals |1 - 2C| pointwise along the grid
        data = trial_data()
        cd = cd_from_pivot("lrt_classic", ML, data)
        psi_vals = cd.grid_psi[::25]
        for psi in psi_vals:
            w = pivot_value("lrt_classic", ML, data, float(psi))
            folded = stats.chi2.cdf(w, df=1)
            assert folded == pytest.approx(abs(1 - 2 * cd.evaluate(float(psi))), abs=5e-3)

    def test_grid_is_monotone_and_spans_tails(self):
        data = trial_data()
        cd = cd_from_pivot("root_robust", HUBER, data)
        assert np.all(np.diff(cd.grid_c) >= 0)
        assert cd.grid_c[0] < 1e-4
        assert cd.grid_c[-1] > 1 - 1e-4


class TestConfidenceDensity:
    def test_wald_density_normalizes_and_peaks(self):
        data = trial_data()
        dens = confidence_density_from_pivot("wald_robust", HUBER, data, width=6.0)
        assert dens.integral() == pytest.approx(1.0, abs=1e-3)
        point = solve(HUBER, data)
        assert dens.mode == pytest.approx(point.psi, abs=0.05)

    def test_root_density_matches_wald_when_quadratic(self):
        # with known scale and the ml score the objective is exactly
        # quadratic, so the root density coincides with the Wald density
        data = trial_data()
        ef = EstimatingFunction("ml_score", "two_sample", known_scale=4.0)
        grid = np.linspace(-2, 7, 181)
        dw = confidence_density_from_pivot("wald_classic", ef, data, grid=grid)
        dr = confidence_density_from_pivot("root_classic", ef, data, grid=grid)
        inner = slice(5, -5)
        assert np.allclose(dw.grid_pdf[inner], dr.grid_pdf[inner], rtol=1e-3, atol=1e-5)


class TestNullUniformity:
    def test_wald_classic_uniform_at_n80(self):
        # closed-form: C(psi0) over 2000 null replicates is near uniform
        reps, n_pg, psi0, sigma = 2000, 40, 2.6, 4.0
        rng = derive_rng(10, "null")
        ys = (120.0 + psi0) + sigma * rng.standard_normal((reps, n_pg))
        yn = 120.0 + sigma * rng.standard_normal((reps, n_pg))
        psi_hat = ys.mean(axis=1) - yn.mean(axis=1)
        sp2 = (ys.var(axis=1, ddof=1) + yn.var(axis=1, ddof=1)) / 2
        se = np.sqrt(sp2 * 2 / n_pg)
        c_vals = stats.norm.cdf((psi0 - psi_hat) / se)
        ks = stats.kstest(c_vals, "uniform").statistic
        assert ks < 1.36 / math.sqrt(reps) * 1.5

    def test_wald_robust_uniform_at_n40(self):
        reps, n_pg = 400, 20
        rng = derive_rng(10, "nullrob")
        c_vals = []
        for _ in range(reps):
            seed = int(rng.integers(0, 2**62))
            data = trial_data(seed=seed, n_per_group=n_pg)
            cd = cd_from_pivot("wald_robust", HUBER, data)
            c_vals.append(cd.evaluate(2.6))
        ks = stats.kstest(np.array(c_vals), "uniform").statistic
        # asymptotic pivot at small n gets the looser factor 2
        assert ks < 1.36 / math.sqrt(reps) * 2.0


class TestTailAreaInfluence:
    def test_huber_clipped_identical(self):
        y = derive_rng(11, "taif").standard_normal(60) + 1
        ef = EstimatingFunction("huber_location", "one_sample")
        psi = float(np.mean(y)) + 0.5
        vals = [tail_area_influence("wald_robust", ef, y, psi, yc) for yc in (1e3, 1e6)]
        assert vals[0] == pytest.approx(vals[1], abs=1e-6)
        assert math.isfinite(vals[0])

    def test_ml_unbounded_grows(self):
        y = derive_rng(11, "taifml").standard_normal(60) + 1
        ef = EstimatingFunction("ml_score", "one_sample")
        psi = float(np.mean(y)) + 0.5
        v10, v1e3, v1e6 = (abs(tail_area_influence("wald_classic", ef, y, psi, yc))
                           for yc in (10.0, 1e3, 1e6))
        assert v1e6 > v1e3 > v10 > 0

    def test_boundedness_contrast_suite(self):
        y = derive_rng(11, "suite").standard_normal(80)
        psi = 0.4
        hub = EstimatingFunction("huber_location", "one_sample")
        ml = EstimatingFunction("ml_score", "one_sample")
        pts = (-1e6, -1e3, -10.0, 10.0, 1e3, 1e6)
        hub_vals = [abs(tail_area_influence("wald_robust", hub, y, psi, yc)) for yc in pts]
        ml_vals = [abs(tail_area_influence("wald_classic", ml, y, psi, yc)) for yc in pts]
        assert max(hub_vals) < 1.0  # bounded
        assert max(ml_vals) > 50 * max(hub_vals)

    def test_zero_at_fitted_center(self):
        y = derive_rng(11, "center").standard_normal(200)
        ef = EstimatingFunction("ml_score", "one_sample", known_scale=1.0)
        point = solve(ef, y)
        val = tail_area_influence("wald_classic", ef, y, 0.8, point.psi)
        assert val == pytest.approx(0.0, abs=1e-8)

    def test_matches_factorized_form(self):
        y = derive_rng(11, "factor").standard_normal(120)
        ef = EstimatingFunction("ml_score", "one_sample", known_scale=1.0)
        point = solve(ef, y)
        gd = godambe(ef, y, point)
        se = math.sqrt(gd.k_psi_psi)
        psi = point.psi + 1.2 * se
        for yc in (-1.5, 0.9, 2.0):
            numeric = tail_area_influence("wald_classic", ef, y, psi, yc)
            q = (psi - point.psi) / se
            analytic = stats.norm.pdf(q) * (-(yc - point.psi) / se)
            assert numeric == pytest.approx(analytic, rel=1e-3)

    def test_two_sample_group_placement(self):
        data = trial_data()
        ef = EstimatingFunction("huber_location", "two_sample")
        v_n = tail_area_influence("wald_robust", ef, data, 3.0, 1e4, group="N")
        v_s = tail_area_influence("wald_robust", ef, data, 3.0, 1e4, group="S")
        assert math.isfinite(v_n) and math.isfinite(v_s)
        assert v_n != v_s

    def test_median_unsupported(self):
        data = trial_data()
        ef = EstimatingFunction("median_sign", "two_sample")
        with pytest.raises(PivotError, match="median_sign"):
            tail_area_influence("wald_robust", ef, data, 2.0, 1e3)


class TestExactT:
    def test_pooled_interval_matches_scipy(self):
        data = trial_data()
        cd = classical_t_cd(data)
        lo, hi = cd.interval(0.95)
        res = stats.ttest_ind(data.y_s, data.y_n)
        ci = res.confidence_interval(0.95)
        assert lo == pytest.approx(ci.low, abs=1e-9)
        assert hi == pytest.approx(ci.high, abs=1e-9)

    def test_welch_flag(self):
        data = trial_data()
        cd = classical_t_cd(data, df="welch")
        res = stats.ttest_ind(data.y_s, data.y_n, equal_var=False)
        ci = res.confidence_interval(0.95)
        lo, hi = cd.interval(0.95)
        assert lo == pytest.approx(ci.low, abs=1e-9)
        assert hi == pytest.approx(ci.high, abs=1e-9)


def test_export_plot_data_columns(tmp_path):
    data = trial_data()
    cd = cd_from_pivot("wald_robust", HUBER, data)
    out = tmp_path / "plot.csv"
    export_plot_data(cd, out, points=101)
    lines = out.read_text().splitlines()
    assert lines[0] == "psi,C,cc,density"
    assert len(lines) == 102
    row = [float(v) for v in lines[50].split(",")]
    assert row[2] == pytest.approx(abs(1 - 2 * row[1]), abs=1e-9)
