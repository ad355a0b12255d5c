"""
Unit tests for standardized mean differences, p-values and balance tables.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.balance import (
    balance_comparison,
    balance_report,
    baseline_table,
    compute_p_value,
    compute_smd,
    significant_balance_summary,
    smd_from_summary,
    write_balance_csv,
)
from src.cohort import FeatureKind
from src.errors import EmptyArm, TooFewObservations
from tests.conftest import make_cohort, make_schema


class TestSMD:
    """Test cases for the standardized mean difference."""

    def test_published_age_summary(self):
        assert smd_from_summary(78.91, 70.81, 7.06, 7.85) == pytest.approx(1.0850, abs=5e-4)

    def test_identical_samples(self):
        values = [1.0, 2.0, 3.0, 4.0]
        assert compute_smd(values, values) == 0.0

    def test_matches_summary_formula(self):
        a, b = np.array([1.0, 2.0, 4.0, 7.0]), np.array([3.0, 5.0, 6.0])
        expected = smd_from_summary(a.mean(), b.mean(), a.std(ddof=1), b.std(ddof=1))
        assert compute_smd(a, b) == pytest.approx(expected)

    def test_binary_uses_proportions(self):
        a, b = [1, 1, 0, 0], [1, 1, 1, 0]
        expected = 0.25 / np.sqrt(0.5 * (0.25 + 0.1875))
        assert compute_smd(a, b, FeatureKind.BINARY) == pytest.approx(expected)

    def test_zero_pooled_variance_is_undefined(self):
        assert compute_smd([1, 1, 1], [0, 0, 0], FeatureKind.BINARY) is None

    def test_missing_values_dropped(self):
        assert compute_smd([1.0, np.nan, 3.0], [1.0, 3.0]) == 0.0

    def test_empty_arm(self):
        with pytest.raises(TooFewObservations):
            compute_smd([np.nan], [1.0, 2.0])


def normal_samples(seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=rng.integers(20, 60)), rng.normal(0.5, 2.0, size=rng.integers(20, 60))


class TestSMDProperties:
    """Test cases for invariances of the SMD."""

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=0.1, max_value=100.0),
        st.floats(min_value=-100.0, max_value=100.0),
    )
    def test_affine_change_of_units(self, seed, scale, shift):
        a, b = normal_samples(seed)
        assert compute_smd(scale * a + shift, scale * b + shift) == pytest.approx(compute_smd(a, b), rel=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_arm_order_does_not_matter(self, seed):
        a, b = normal_samples(seed)
        assert compute_smd(a, b) == pytest.approx(compute_smd(b, a), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.booleans(), min_size=2, max_size=40), st.lists(st.booleans(), min_size=2, max_size=40))
    def test_duplicating_binary_samples(self, a, b):
        a, b = np.array(a, dtype=float), np.array(b, dtype=float)
        once = compute_smd(a, b, FeatureKind.BINARY)
        twice = compute_smd(np.tile(a, 2), np.tile(b, 2), FeatureKind.BINARY)

        assert (once is None) == (twice is None)
        if once is not None:
            assert twice == pytest.approx(once, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_duplicating_continuous_samples(self, seed):
        """Only the n-1 variance denominator moves, by under 2% for 20+ patients per arm."""
        a, b = normal_samples(seed)
        assert compute_smd(np.tile(a, 2), np.tile(b, 2)) == pytest.approx(compute_smd(a, b), rel=0.02)


class TestPValue:
    """Test cases for balance significance tests."""

    def test_identical_samples(self):
        assert compute_p_value([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(1.0)

    def test_separated_binary_samples(self):
        assert compute_p_value([0] * 5, [1] * 5, FeatureKind.BINARY) < 0.01

    def test_welch_against_scipy(self):
        from scipy import stats

        a, b = np.array([1.0, 2.5, 3.0, 4.2]), np.array([2.0, 5.0, 6.5, 7.0, 9.0])
        expected = stats.ttest_ind(a, b, equal_var=False).pvalue
        assert compute_p_value(a, b) == pytest.approx(expected)

    def test_too_few_observations(self):
        with pytest.raises(TooFewObservations):
            compute_p_value([1.0], [1.0, 2.0])

    @pytest.mark.slow
    def test_calibrated_under_the_null(self):
        rejections = 0
        for seed in range(500):
            rng = np.random.default_rng(seed)
            if compute_p_value(rng.normal(size=500), rng.normal(size=500)) < 0.05:
                rejections += 1
        assert 0.02 <= rejections / 500 <= 0.09


class TestBalanceReport:
    """Test cases for per-feature balance reports."""

    def test_mirrored_arms_have_zero_smd(self):
        features = [[70.0, 1.0], [80.0, 0.0], [70.0, 1.0], [80.0, 0.0]]
        schema = make_schema(continuous=("age",), binary=("diabetes",))
        report = balance_report(make_cohort(features, [0, 0, 1, 1], schema=schema))

        assert all(row.smd == 0.0 for row in report.rows)

    def test_confounded_synthetic_cohort_is_imbalanced(self, small_synth):
        cohort, _ = small_synth
        report = balance_report(cohort)

        assert report.max_smd() > 0.1
        assert "x0" in report.imbalanced()
        assert [row.smd for row in report.rows] == sorted((row.smd for row in report.rows), reverse=True)

    def test_single_arm(self):
        with pytest.raises(EmptyArm):
            balance_report(make_cohort([[1.0], [2.0]], [1, 1]))

    def test_comparison_keeps_every_feature(self, small_synth):
        cohort, _ = small_synth
        pre = balance_report(cohort)
        post = balance_report(cohort.subset(np.arange(0, cohort.n, 2)))
        comparison = balance_comparison(pre, post)

        assert len(comparison) == len(pre.rows)
        summary = significant_balance_summary(comparison)
        assert summary["n_features"] == cohort.schema.p
        assert summary["n_significant_improved"] <= summary["n_significant_pre"]

    def test_baseline_table_and_undefined_marker(self, tmp_path):
        schema = make_schema(continuous=("age",), binary=("male",))
        cohort = make_cohort([[70.0, 1.0], [75.0, 1.0], [80.0, 1.0], [85.0, 1.0]], [0, 0, 1, 1], schema=schema)
        table = baseline_table(cohort)
        write_balance_csv(table, tmp_path / "baseline.csv")

        assert list(table["feature"]) == ["age", "male"]
        assert table.loc[1, "savr"] == "100.0%"
        assert "--" in (tmp_path / "baseline.csv").read_text(encoding="utf-8")
