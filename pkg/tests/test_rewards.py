"""
Unit tests for the counterfactual risk matrix.
"""

import numpy as np
import pytest

from src.cohort import TreatmentArm, split_by_arm
from src.errors import DuplicateId, InconsistentDimensions, SchemaMismatch
from src.rewards import (
    RewardsMatrix,
    align_rewards,
    best_uniform_arm,
    estimate_rewards,
    load_rewards_csv,
    rowwise_best_arms,
    write_rewards_csv,
)
from src.survival_forest import ForestParams, fit_forest, predict_risk
from src.synthetic import SubgroupRule, SynthConfig, generate_cohort
from tests.conftest import make_cohort


@pytest.fixture(scope="module")
def arm_forests():
    cohort, _ = generate_cohort(SynthConfig(n=200, p_continuous=2, p_binary=0, include_sts=False, seed=3))
    savr, tavr = split_by_arm(cohort)
    params = ForestParams(n_trees=5, min_leaf=5, seed=1)
    return cohort, fit_forest(savr, params), fit_forest(tavr, params)


class TestEstimateRewards:
    """Test cases for predicting both arms for every patient."""

    def test_single_patient(self, arm_forests):
        cohort, forest_savr, forest_tavr = arm_forests
        one = cohort.subset([0])
        rewards = estimate_rewards(one, forest_savr, forest_tavr)

        assert rewards.gamma.shape == (1, 2)
        assert rewards.gamma[0, 0] == pytest.approx(predict_risk(forest_savr, one.features[0]))
        assert rewards.gamma[0, 1] == pytest.approx(predict_risk(forest_tavr, one.features[0]))
        assert rewards.ids == one.ids

    def test_identical_forests_give_equal_columns(self, arm_forests):
        cohort, forest_savr, _ = arm_forests
        rewards = estimate_rewards(cohort, forest_savr, forest_savr)
        np.testing.assert_array_equal(rewards.gamma[:, 0], rewards.gamma[:, 1])

    def test_feature_mismatch(self, arm_forests):
        _, forest_savr, forest_tavr = arm_forests
        other = make_cohort(np.zeros((2, 3)), [0, 1])
        with pytest.raises(SchemaMismatch):
            estimate_rewards(other, forest_savr, forest_tavr)

    @pytest.mark.slow
    def test_planted_tavr_benefit(self):
        config = SynthConfig(
            n=500,
            p_continuous=2,
            p_binary=0,
            confounding_strength=0.5,
            subgroup_rules=[
                SubgroupRule(feature="x1", threshold=0.0, hazard_multiplier_savr=2.0, hazard_multiplier_tavr=1.0),
            ],
            base_hazard=3e-4,
            seed=8,
        )
        cohort, _ = generate_cohort(config)
        savr, tavr = split_by_arm(cohort)
        params = ForestParams(n_trees=30, min_leaf=10, seed=4)
        rewards = estimate_rewards(cohort, fit_forest(savr, params), fit_forest(tavr, params))
        subgroup = cohort.column("x1") > 0

        assert rewards.gamma[subgroup, 1].mean() < rewards.gamma[subgroup, 0].mean()


class TestUniformArm:
    """Test cases for t* and the row-wise oracle."""

    def test_tavr_has_smaller_sum(self):
        assert best_uniform_arm(RewardsMatrix(np.array([[0.3, 0.1], [0.2, 0.3]]))) == TreatmentArm.TAVR

    def test_tie_goes_to_savr(self):
        assert best_uniform_arm(RewardsMatrix(np.array([[0.2, 0.1], [0.1, 0.2]]))) == TreatmentArm.SAVR

    def test_matches_column_scan(self):
        gamma = np.random.default_rng(0).random((100, 2))
        expected = TreatmentArm.TAVR if gamma[:, 1].sum() < gamma[:, 0].sum() else TreatmentArm.SAVR
        assert best_uniform_arm(RewardsMatrix(gamma)) == expected

    def test_rowwise_best(self):
        rewards = RewardsMatrix(np.array([[0.2, 0.1], [0.3, 0.4], [0.5, 0.5]]))
        assert list(rowwise_best_arms(rewards)) == [1, 0, 0]


class TestRewardsFiles:
    """Test cases for rewards CSV handling."""

    def test_shape_is_checked(self):
        with pytest.raises(InconsistentDimensions):
            RewardsMatrix(np.zeros((3, 3)))

    def test_write_load_and_align(self, tmp_path):
        cohort = make_cohort([[1.0], [2.0], [3.0]], [0, 1, 0])
        rewards = RewardsMatrix(np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]), ids=cohort.ids)
        write_rewards_csv(rewards, tmp_path / "rewards.csv")
        loaded = load_rewards_csv(tmp_path / "rewards.csv")
        reordered = align_rewards(loaded, cohort.subset([2, 0]))

        np.testing.assert_array_equal(loaded.gamma, rewards.gamma)
        np.testing.assert_array_equal(reordered.gamma, [[0.5, 0.6], [0.1, 0.2]])

    def test_align_with_unknown_patient(self):
        rewards = RewardsMatrix(np.array([[0.1, 0.2]]), ids=("other",))
        with pytest.raises(InconsistentDimensions):
            align_rewards(rewards, make_cohort([[1.0]], [0]))

    def test_risks_reload_bit_for_bit(self, tmp_path):
        gamma = np.random.default_rng(5).random((200, 2)) / 3.0
        rewards = RewardsMatrix(gamma, ids=tuple(f"p{i}" for i in range(200)))
        write_rewards_csv(rewards, tmp_path / "rewards.csv")

        assert np.array_equal(load_rewards_csv(tmp_path / "rewards.csv").gamma, gamma)

    def test_repeated_patient(self, tmp_path):
        path = tmp_path / "rewards.csv"
        path.write_text("id,risk_savr,risk_tavr\np1,0.1,0.2\np2,0.3,0.4\np1,0.5,0.6\n", encoding="utf-8")
        with pytest.raises(DuplicateId):
            load_rewards_csv(path)
