import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from robustcd.cd import ConfidenceDistribution
from robustcd.models import ContaminationRecipe, DatasetSpec, OneSampleModel, sample
from robustcd.npcd import ReferenceSpec, _distance_rows, contamination_shift, distance, semimetric_cd
from robustcd.rng import derive_rng


def quadrature_w1(x, y):
    """Independent oracle: numeric integration of |Fx - Fy|, piecewise
    between ECDF breakpoints where the integrand is constant."""
    x = np.sort(x)
    y = np.sort(y)

    def integrand(t):
        fx = np.searchsorted(x, t, side="right") / x.size
        fy = np.searchsorted(y, t, side="right") / y.size
        return abs(fx - fy)

    breaks = np.unique(np.concatenate([x, y]))
    return sum(integrate.quad(integrand, a, b)[0]
               for a, b in zip(breaks[:-1], breaks[1:]))


class TestDistance:
    def test_identity(self):
        x = np.array([0.3, 1.2, -0.7])
        assert distance("ks", x, x) == 0.0
        assert distance("wasserstein1", x, x) == 0.0

    def test_hand_enumeration(self):
        x, y = [1.0, 2.0, 3.0], [1.5, 2.5, 3.5]
        assert distance("ks", x, y) == pytest.approx(1.0 / 3.0)
        assert distance("wasserstein1", x, y) == pytest.approx(0.5)

    def test_w1_shift_property(self):
        x = derive_rng(1, "shift").standard_normal(40)
        for a in (-3.0, 0.25, 7.0):
            assert distance("wasserstein1", x, x + a) == pytest.approx(abs(a), abs=1e-12)

    def test_translation_consistency(self):
        rng = derive_rng(1, "trans")
        x, y = rng.standard_normal(30), rng.standard_normal(50) + 1
        for kind in ("ks", "wasserstein1"):
            base = distance(kind, x, y)
            assert distance(kind, x + 5.5, y + 5.5) == pytest.approx(base, abs=1e-12)

    def test_semimetric_axioms(self):
        rng = derive_rng(1, "axioms")
        samples = [rng.standard_normal(25), rng.standard_normal(25) + 1,
                   rng.standard_normal(40) * 2]
        for kind in ("ks", "wasserstein1"):
            for a, b in itertools.permutations(samples, 2):
                assert distance(kind, a, b) == pytest.approx(distance(kind, b, a), abs=1e-12)
            for a, b, c in itertools.permutations(samples, 3):
                assert distance(kind, a, c) <= distance(kind, a, b) + distance(kind, b, c) + 1e-12

    def test_ks_bounded(self):
        rng = derive_rng(1, "bound")
        x, y = rng.standard_normal(20), rng.standard_normal(20) + 100
        assert distance("ks", x, y) == pytest.approx(1.0)

    def test_breakpoint_formula_vs_quadrature(self):
        rng = derive_rng(1, "quad")
        for _ in range(10):
            x = rng.standard_normal(rng.integers(5, 30))
            y = rng.standard_normal(rng.integers(5, 30)) + rng.uniform(-1, 1)
            assert distance("wasserstein1", x, y) == pytest.approx(quadrature_w1(x, y), abs=1e-10)

    def test_equal_size_sorted_mean_identity(self):
        rng = derive_rng(1, "equal")
        x, y = rng.standard_normal(50), rng.standard_normal(50) * 2 + 1
        expect = float(np.mean(np.abs(np.sort(x) - np.sort(y))))
        assert distance("wasserstein1", x, y) == pytest.approx(expect, abs=1e-12)

    def test_rows_match_scalar(self):
        rng = derive_rng(1, "rows")
        rows = rng.standard_normal((12, 23))
        ref = rng.standard_normal(31)
        for kind in ("ks", "wasserstein1"):
            batch = _distance_rows(kind, rows, ref)
            scalar = [distance(kind, row, ref) for row in rows]
            assert np.allclose(batch, scalar, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            distance("ks", [], [1.0])
        with pytest.raises(ValueError, match="kind"):
            distance("energy", [1.0], [2.0])

    @given(st.floats(-10, 10), st.lists(st.floats(-5, 5), min_size=2, max_size=20))
    @settings(max_examples=40, deadline=None)
    def test_w1_shift_hypothesis(self, a, values):
        x = np.asarray(values)
        assert distance("wasserstein1", x, x + a) == pytest.approx(abs(a), abs=1e-9)


class TestSemimetricCd:
    def test_clean_median_near_sample_mean(self):
        model = OneSampleModel(theta=1.0, n=100)
        y = sample(DatasetSpec(model=model, seed=13))
        cd = semimetric_cd("wasserstein1", y, ReferenceSpec(), (-3.0, 3.0), r=20_000, seed=13)
        assert isinstance(cd, ConfidenceDistribution)
        assert cd.median() == pytest.approx(float(np.mean(y)), abs=2.0 / math.sqrt(100))

    def test_determinism(self):
        y = sample(DatasetSpec(model=OneSampleModel(theta=1.0, n=60), seed=2))
        a = semimetric_cd("ks", y, ReferenceSpec(), (-3.0, 3.0), r=5000, seed=4)
        b = semimetric_cd("ks", y, ReferenceSpec(), (-3.0, 3.0), r=5000, seed=4)
        assert np.array_equal(a.grid_c, b.grid_c)

    def test_reference_defaults_to_sup(self):
        y = sample(DatasetSpec(model=OneSampleModel(theta=1.0, n=60), seed=2))
        cd = semimetric_cd("wasserstein1", y, ReferenceSpec(), (-3.0, 3.0), r=5000, seed=4)
        assert cd.diagnostics["theta_ref"] == 3.0
        assert cd.diagnostics["orientation"] == "decreasing"

    def test_far_reference_saturates_ks(self):
        y = sample(DatasetSpec(model=OneSampleModel(theta=1.0, n=60), seed=2))
        result = semimetric_cd("ks", y, ReferenceSpec(theta_ref=500.0), (-3.0, 3.0),
                               r=4000, seed=4)
        assert result.diagnostics["t_obs"] == pytest.approx(1.0)
        assert result.diagnostics.get("low_discrimination", False)


class TestContaminationShift:
    def base_spec(self, seed=3):
        return DatasetSpec(model=OneSampleModel(theta=1.0, n=100), seed=seed)

    def test_no_contamination_no_shift(self):
        recipe = ContaminationRecipe(fraction=0.0, mechanism="cauchy_extreme_replacement")
        records = contamination_shift(self.base_spec(), recipe, (-3.0, 3.0), r=20_000)
        assert records[0]["shift"] == pytest.approx(0.0, abs=0.05)

    def test_shift_monotone_in_fraction(self):
        # same base draws: more contamination moves the confidence median at
        # least as far.  A moderate contamination scale keeps both medians in
        # the interior of the proposal range where the comparison is sharp.
        shifts = {}
        for eps in (0.05, 0.15):
            recipe = ContaminationRecipe(fraction=eps, scale=0.2,
                                         mechanism="cauchy_extreme_replacement")
            records = contamination_shift(self.base_spec(seed=8), recipe, (-3.0, 3.0),
                                          r=20_000)
            shifts[eps] = abs(records[0]["shift"])
        assert shifts[0.05] <= shifts[0.15] + 0.05

    def test_reference_sweep_barycenter(self):
        # the shift shrinks when the reference sits near the midpoint of the
        # central and contaminating values, and grows at the default edge
        recipe = ContaminationRecipe(fraction=0.2, mechanism="cauchy_extreme_replacement")
        base = self.base_spec(seed=5)
        contaminated = sample(DatasetSpec(model=base.model, seed=5, contamination=recipe))
        extreme = float(np.max(contaminated))
        barycenter = 0.5 * (1.0 + extreme)
        refs = [3.0, barycenter]
        records = contamination_shift(base, recipe, (-3.0, 3.0), r=20_000,
                                      theta_refs=refs)
        by_ref = {r["theta_ref"]: r for r in records}
        shift_edge = abs(by_ref[3.0]["shift"])
        shift_bary = abs(by_ref[barycenter]["shift"])
        assert shift_bary < shift_edge

    def test_sweep_output_shape(self):
        recipe = ContaminationRecipe(fraction=0.1, mechanism="cauchy_extreme_replacement")
        refs = [3.0, 6.0, 10.0]
        records = contamination_shift(self.base_spec(), recipe, (-3.0, 3.0), r=4000,
                                      theta_refs=refs)
        assert [r["theta_ref"] for r in records] == refs
        for r in records:
            assert set(r) == {"theta_ref", "median_clean", "median_contaminated", "shift"}
