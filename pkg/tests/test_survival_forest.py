"""
Unit tests for Nelson-Aalen curves, log-rank splits and random survival forests.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.errors import InvalidConfig, MissingFeature, NoComparablePairs, NoEvents, TooFewRows
from src.survival_forest import (
    ForestParams,
    best_split,
    fit_forest,
    forest_fingerprint,
    harrell_c,
    load_forest,
    logrank_scores,
    nelson_aalen,
    oob_concordance,
    predict_risk,
    predict_risks,
    save_forest,
    tune_min_leaf,
)
from src.synthetic import SubgroupRule, SynthConfig, generate_cohort
from tests.conftest import make_cohort


def logrank_oracle(left, times, events):
    """Squared log-rank statistic of `left` versus the rest, by explicit loops."""
    numerator, variance = 0.0, 0.0
    for t in np.unique(times[events]):
        at_risk = times >= t
        n, n_left = at_risk.sum(), (at_risk & left).sum()
        d = ((times == t) & events).sum()
        d_left = ((times == t) & events & left).sum()
        numerator += d_left - d * n_left / n
        if n > 1:
            variance += d * (n_left / n) * (1 - n_left / n) * (n - d) / (n - 1)
    return numerator ** 2 / variance if variance > 0 else None


def forest_cohort(n=80, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    hazard = 1e-3 * np.exp(X[:, 0])
    times = rng.exponential(1.0, n) / hazard
    censor = rng.exponential(1.0, n) / 2e-4
    return make_cohort(X, rng.integers(0, 2, n), np.minimum(times, censor), times <= censor)


class TestNelsonAalen:
    """Test cases for cumulative hazard estimation."""

    def test_three_deaths(self):
        curve = nelson_aalen(np.array([1.0, 2.0, 3.0]), np.array([True, True, True]))

        assert curve.at(3.0) == pytest.approx(11 / 6)
        assert 1 - curve.survival(1825.0) == pytest.approx(1 - np.exp(-11 / 6))
        assert 1 - curve.survival(1825.0) >= 0.8

    def test_before_first_event(self):
        curve = nelson_aalen(np.array([10.0, 20.0]), np.array([True, False]))
        assert curve.at(5.0) == 0.0

    def test_censored_rows_leave_risk_set(self):
        curve = nelson_aalen(np.array([1.0, 2.0, 2.0, 3.0]), np.array([True, True, False, True]))

        assert curve.at(1.5) == pytest.approx(1 / 4)
        assert curve.at(2.0) == pytest.approx(1 / 4 + 1 / 3)
        assert curve.at(3.0) == pytest.approx(1 / 4 + 1 / 3 + 1.0)

    def test_no_events(self):
        curve = nelson_aalen(np.array([1.0, 2.0]), np.array([False, False]))
        assert curve.at(100.0) == 0.0


class TestLogRank:
    """Test cases for log-rank split scoring."""

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_scores_match_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 6, 15).astype(float)
        times = rng.integers(1, 8, 15).astype(float)
        events = rng.random(15) < 0.6
        thresholds, statistics = logrank_scores(x, times, events, min_leaf=1)

        for threshold, statistic in zip(thresholds, statistics):
            assert statistic == pytest.approx(logrank_oracle(x <= threshold, times, events))

    def test_best_split_finds_separating_feature(self):
        times = np.array([1.0, 2.0, 3.0, 4.0, 50.0, 60.0, 70.0, 80.0])
        events = np.ones(8, dtype=bool)
        X = np.column_stack([[0, 1, 0, 1, 0, 1, 0, 1], [1, 2, 3, 4, 5, 6, 7, 8]]).astype(float)
        feature, threshold, _ = best_split(X, times, events, [0, 1], min_leaf=2)

        assert feature == 1
        assert threshold == pytest.approx(2.5)

    def test_min_leaf_limits_thresholds(self):
        x = np.arange(6, dtype=float)
        thresholds, _ = logrank_scores(x, np.arange(1, 7, dtype=float), np.ones(6, dtype=bool), min_leaf=3)
        assert list(thresholds) == [2.5]


class TestFitForest:
    """Test cases for forest fitting and prediction."""

    def test_all_censored(self):
        cohort = make_cohort(np.arange(10.0), [0] * 10, events=np.zeros(10, dtype=bool))
        with pytest.raises(NoEvents):
            fit_forest(cohort, ForestParams(n_trees=2, min_leaf=2))

    def test_too_few_rows(self):
        cohort = make_cohort(np.arange(5.0), [0] * 5, events=np.ones(5, dtype=bool))
        with pytest.raises(TooFewRows):
            fit_forest(cohort, ForestParams(n_trees=2, min_leaf=3))

    def test_missing_features(self):
        cohort = make_cohort([[1.0], [np.nan], [2.0], [3.0]], [0] * 4, events=np.ones(4, dtype=bool))
        with pytest.raises(MissingFeature):
            fit_forest(cohort, ForestParams(n_trees=2, min_leaf=1))

    def test_invalid_mtry(self):
        with pytest.raises(InvalidConfig):
            fit_forest(forest_cohort(), ForestParams(n_trees=2, min_leaf=5, mtry=4))

    def test_stumps_predict_bootstrap_nelson_aalen(self):
        cohort = forest_cohort(40)
        forest = fit_forest(cohort, ForestParams(n_trees=5, min_leaf=2, max_depth=0, seed=1))
        horizon = 1825.0
        expected = np.mean([
            nelson_aalen(cohort.times[rows], cohort.events[rows]).at(horizon)
            for rows in forest.bootstrap_indices
        ])

        risks = predict_risks(forest, cohort.features, horizon)
        np.testing.assert_allclose(risks, 1 - np.exp(-expected))

    def test_horizon_before_first_event(self):
        cohort = forest_cohort()
        forest = fit_forest(cohort, ForestParams(n_trees=3, min_leaf=5))
        early = 0.5 * cohort.times[cohort.events].min()

        assert predict_risk(forest, cohort.features[0], early) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(
        st.integers(min_value=0, max_value=10_000),
        st.floats(min_value=0.0, max_value=6000.0),
        st.floats(min_value=0.0, max_value=6000.0),
    )
    def test_risk_grows_with_horizon(self, seed, first, second):
        cohort = forest_cohort(40, seed=seed % 50)
        forest = fit_forest(cohort, ForestParams(n_trees=3, min_leaf=4, seed=seed))
        early, late = sorted((first, second))
        x = cohort.features[seed % cohort.n]

        assert predict_risk(forest, x, early) <= predict_risk(forest, x, late)

    def test_deterministic_across_workers(self):
        cohort = forest_cohort()
        params = ForestParams(n_trees=6, min_leaf=5, seed=42)
        serial = fit_forest(cohort, params, n_jobs=1)
        parallel = fit_forest(cohort, params, n_jobs=3)

        np.testing.assert_array_equal(predict_risks(serial, cohort.features), predict_risks(parallel, cohort.features))
        assert forest_fingerprint(serial) == forest_fingerprint(parallel)

    def test_weighted_bootstrap_only_draws_weighted_rows(self):
        cohort = forest_cohort(30)
        weights = np.ones(30)
        weights[:10] = 1e-12
        forest = fit_forest(cohort, ForestParams(n_trees=4, min_leaf=3), sample_weights=weights)

        assert all(np.isin(rows, np.arange(10)).mean() < 0.05 for rows in forest.bootstrap_indices)

    def test_save_and_load(self, tmp_path):
        cohort = forest_cohort()
        forest = fit_forest(cohort, ForestParams(n_trees=3, min_leaf=5, seed=7))
        save_forest(forest, tmp_path / "forest.json")
        loaded = load_forest(tmp_path / "forest.json")

        np.testing.assert_array_equal(predict_risks(loaded, cohort.features), predict_risks(forest, cohort.features))
        assert forest_fingerprint(loaded) == forest_fingerprint(forest)

    def test_tune_min_leaf(self):
        cohort = forest_cohort(60)
        best, scores = tune_min_leaf(cohort, ForestParams(n_trees=5, seed=2), [3, 6])

        assert set(scores) == {3, 6}
        assert best in scores


class TestOutOfBagCoverage:
    """Test cases for redrawing the forest seed until every patient is out-of-bag."""

    @pytest.mark.parametrize("seed", range(20))
    def test_every_patient_is_left_out_once(self, seed):
        cohort = forest_cohort(30, seed=seed)
        forest = fit_forest(cohort, ForestParams(n_trees=10, min_leaf=3, seed=seed))

        assert set(np.concatenate(forest.oob_indices)) == set(range(30))

    def test_seed_kept_when_already_covering(self):
        forest = fit_forest(forest_cohort(30), ForestParams(n_trees=50, min_leaf=3, seed=5))
        assert forest.params.seed == 5

    def test_redrawn_forest_is_reproducible(self):
        cohort = forest_cohort(30, seed=3)
        params = ForestParams(n_trees=10, min_leaf=3, seed=3)
        assert forest_fingerprint(fit_forest(cohort, params)) == forest_fingerprint(fit_forest(cohort, params))

    def test_two_trees_fall_back(self):
        cohort = forest_cohort(80)
        forest = fit_forest(cohort, ForestParams(n_trees=2, min_leaf=5, seed=1))

        assert len(set(np.concatenate(forest.oob_indices))) < 80
        assert 0.0 <= oob_concordance(forest, cohort) <= 1.0


class TestConcordance:
    """Test cases for Harrell's C."""

    def test_all_ties(self):
        assert harrell_c([1.0, 2.0, 3.0], [True, True, True], [0.5, 0.5, 0.5]) == 0.5

    def test_perfect_ranking(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        assert harrell_c(times, np.ones(4, dtype=bool), -times) == 1.0

    def test_no_comparable_pairs(self):
        with pytest.raises(NoComparablePairs):
            harrell_c([1.0, 2.0], [False, False], [0.1, 0.2])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_matches_pair_count(self, seed):
        rng = np.random.default_rng(seed)
        times = rng.integers(1, 10, 20).astype(float)
        events = rng.random(20) < 0.5
        events[0] = True
        times[0] = 0.0
        risk = rng.integers(0, 4, 20).astype(float)
        concordant, comparable = 0.0, 0
        for i in range(20):
            for j in range(20):
                if events[i] and times[i] < times[j]:
                    comparable += 1
                    concordant += 1.0 if risk[i] > risk[j] else 0.5 if risk[i] == risk[j] else 0.0

        assert harrell_c(times, events, risk) == pytest.approx(concordant / comparable)

    @pytest.mark.slow
    def test_oob_concordance_on_proportional_hazards(self):
        config = SynthConfig(
            n=500,
            p_continuous=2,
            p_binary=0,
            confounding_strength=0.0,
            frailty_log_hazard=float(np.log(3.0)),
            subgroup_rules=[
                SubgroupRule(feature="x1", threshold=0.0, hazard_multiplier_savr=3.0, hazard_multiplier_tavr=3.0),
            ],
            include_sts=False,
            seed=5,
        )
        cohort, _ = generate_cohort(config)
        forest = fit_forest(cohort, ForestParams(n_trees=50, min_leaf=10, seed=1))

        assert oob_concordance(forest, cohort) >= 0.70
