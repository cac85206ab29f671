import numpy as np
import pytest

from robustcd.models import (
    ContaminationRecipe,
    CsvFormatError,
    DatasetSpec,
    OneSampleModel,
    RegressionModel,
    TwoSampleModel,
    contaminated_count,
    load_one_sample_csv,
    load_regression_csv,
    load_synthetic_trial,
    load_two_sample_csv,
    regression_sample,
    sample,
)


def two_sample_spec(seed=1, fraction=0.0, **kw):
    model = TwoSampleModel(mu_n=kw.get("mu_n", 120.0), psi=kw.get("psi", 2.6),
                           sigma=kw.get("sigma", 4.0), n_per_group=kw.get("n", 20))
    recipe = ContaminationRecipe(fraction=fraction) if fraction else None
    return DatasetSpec(model=model, seed=seed, contamination=recipe)


class TestTwoSampleSampler:
    def test_zero_noise_exact(self):
        spec = DatasetSpec(model=TwoSampleModel(mu_n=120.0, psi=2.6, sigma=0.0, n_per_group=3),
                           seed=0)
        data = sample(spec)
        assert np.allclose(data.y_s, 122.6)
        assert np.allclose(data.y_n, 120.0)

    def test_contaminated_count_rule(self):
        assert contaminated_count(0.10, 40) == 4
        assert contaminated_count(0.10, 15) == 2  # round half up
        assert contaminated_count(0.0, 40) == 0

    def test_exact_contamination_count(self):
        clean = sample(two_sample_spec(seed=7, n=40))
        dirty = sample(two_sample_spec(seed=7, n=40, fraction=0.10))
        # same base draws: exactly 4 new-group values replaced
        changed = np.sum(~np.isin(np.round(dirty.y_n, 12), np.round(clean.y_n, 12)))
        assert changed == 4

    def test_determinism(self):
        a = sample(two_sample_spec(seed=123, fraction=0.1))
        b = sample(two_sample_spec(seed=123, fraction=0.1))
        assert np.array_equal(a.y_s, b.y_s) and np.array_equal(a.y_n, b.y_n)
        c = sample(two_sample_spec(seed=124, fraction=0.1))
        assert not np.array_equal(a.y_n, c.y_n)

    def test_standard_group_untouched(self):
        clean = sample(two_sample_spec(seed=11, n=30))
        dirty = sample(two_sample_spec(seed=11, n=30, fraction=0.2))
        assert np.array_equal(clean.y_s, dirty.y_s)

    def test_contamination_degrades_new_arm(self):
        # heavy-tailed errors push new-group responses down on average
        shifts = []
        for seed in range(40):
            clean = sample(two_sample_spec(seed=seed, n=40))
            dirty = sample(two_sample_spec(seed=seed, n=40, fraction=0.10))
            shifts.append(np.mean(dirty.y_n) - np.mean(clean.y_n))
        assert np.mean(shifts) < 0
        assert max(shifts) <= 0

    def test_mean_difference_converges(self):
        # empirical mean difference over many replicates converges to psi
        n, reps, sigma = 10, 100_000, 1.0
        rng_spec = two_sample_spec(seed=5, n=n, sigma=sigma, psi=2.6)
        from robustcd.rng import derive_rng

        rng = derive_rng(5, "bulk")
        ys = 122.6 + sigma * rng.standard_normal((reps, n))
        yn = 120.0 + sigma * rng.standard_normal((reps, n))
        diff = (ys.mean(axis=1) - yn.mean(axis=1)).mean()
        tol = 3.0 * sigma / np.sqrt(reps * n)
        assert abs(diff - 2.6) < 3.0 * np.sqrt(2.0 / (reps * n)) * sigma + tol


class TestOneSampleContamination:
    def test_single_max_copied(self):
        model = OneSampleModel(theta=1.0, n=100)
        recipe = ContaminationRecipe(fraction=0.15, mechanism="cauchy_extreme_replacement")
        y = sample(DatasetSpec(model=model, seed=3, contamination=recipe))
        values, counts = np.unique(y, return_counts=True)
        assert counts.max() == 15  # one extreme value copied into 15 slots
        assert values[np.argmax(counts)] > np.median(y)

    def test_iid_extremes_flag(self):
        model = OneSampleModel(theta=1.0, n=100)
        recipe = ContaminationRecipe(fraction=0.10, mechanism="cauchy_extreme_replacement",
                                     extremes="iid_extremes")
        y = sample(DatasetSpec(model=model, seed=3, contamination=recipe))
        _, counts = np.unique(y, return_counts=True)
        assert counts.max() == 1

    def test_mechanism_guard(self):
        model = OneSampleModel(theta=1.0, n=100)
        recipe = ContaminationRecipe(fraction=0.1)
        with pytest.raises(ValueError, match="Cauchy-extreme"):
            sample(DatasetSpec(model=model, seed=0, contamination=recipe))


class TestRegressionSampler:
    def make_model(self, sigma, beta=(1.0, 1.0, -5.0), n=8):
        y_bl = tuple(float(10 + i) for i in range(n))
        p = tuple(i % 2 for i in range(n))
        return RegressionModel(beta0=beta[0], beta1=beta[1], beta2=beta[2],
                               sigma=sigma, y_bl=y_bl, p=p)

    def test_zero_noise_linear(self):
        model = self.make_model(sigma=0.0)
        data = regression_sample(DatasetSpec(model=model, seed=0))
        expect = 1.0 + 1.0 * data.y_bl - 5.0 * data.p
        assert np.allclose(data.y_fu, expect)
        subject = data.y_fu[data.p == 1][0]
        assert subject == pytest.approx(1.0 + data.y_bl[data.p == 1][0] - 5.0)

    def test_control_independent_of_treatment_coef(self):
        a = regression_sample(DatasetSpec(model=self.make_model(0.0, beta=(1, 1, -5)), seed=0))
        b = regression_sample(DatasetSpec(model=self.make_model(0.0, beta=(1, 1, 99)), seed=0))
        assert np.allclose(a.y_fu[a.p == 0], b.y_fu[b.p == 0])

    def test_design_validation(self):
        with pytest.raises(ValueError):
            RegressionModel(beta0=0, beta1=0, beta2=0, sigma=1,
                            y_bl=(1.0, 2.0, 3.0, 4.0), p=(1, 1, 1, 1))


class TestCsv:
    def test_two_sample_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,group\n1.5,S\n2.5,S\n0.5,N\n0.25,N\n")
        data = load_two_sample_csv(path)
        assert np.allclose(data.y_s, [1.5, 2.5])
        assert np.allclose(data.y_n, [0.5, 0.25])

    def test_parse_error_carries_line(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("y,group\n1.5,S\nxx,N\n")
        with pytest.raises(CsvFormatError) as err:
            load_two_sample_csv(path)
        assert err.value.line_no == 3

    def test_header_required(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("1.5,S\n2.5,N\n")
        with pytest.raises(CsvFormatError, match="header"):
            load_two_sample_csv(path)

    def test_regression_and_one_sample(self, tmp_path):
        reg = tmp_path / "r.csv"
        reg.write_text("y_fu,y_bl,p\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n")
        data = load_regression_csv(reg)
        assert data.n == 4
        one = tmp_path / "o.csv"
        one.write_text("y\n1.0\n2.0\n")
        assert np.allclose(load_one_sample_csv(one), [1.0, 2.0])

    def test_synthetic_trial_summary(self):
        data = load_synthetic_trial()
        assert data.n == 57
        assert set(np.unique(data.p)) == {0.0, 1.0}
        x = np.column_stack([data.p, np.ones(57), data.y_bl])
        beta, *_ = np.linalg.lstsq(x, data.y_fu, rcond=None)
        resid = data.y_fu - x @ beta
        se = np.sqrt(resid @ resid / 54 * np.linalg.inv(x.T @ x)[0, 0])
        assert beta[0] == pytest.approx(-5.32, abs=0.01)
        assert se == pytest.approx(1.44, abs=0.01)
