"""
Unit tests for policy tree fitting, prescription and export.
"""

import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.cohort import TreatmentArm, derive_labels, label_codes
from src.errors import InconsistentDimensions, InvalidConfig, MissingFeature
from src.policy_tree import (
    LEAF_TABLE_COLUMNS,
    TreeParams,
    export_tree,
    fit_policy_tree,
    leaf_table,
    load_tree,
    objective,
    prescribe,
    prescribe_many,
    route,
    save_tree,
    tree_fingerprint,
    tree_from_dict,
    tree_json,
)
from src.rewards import RewardsMatrix, best_uniform_arm
from src.synthetic import generate_cohort, policy_regret, recovery_config
from tests.conftest import make_cohort

FOUR_GAMMA = np.array([[0.1, 0.9], [0.1, 0.9], [0.9, 0.1], [0.9, 0.1]])
FOUR_X = np.array([[1.0], [2.0], [3.0], [4.0]])


def params(depth, min_leaf=1, restarts=3, seed=0):
    return TreeParams(max_depth=depth, min_leaf=min_leaf, n_restarts=restarts, seed=seed)


def leaf_cost(gamma, rows):
    return gamma[rows].sum(axis=0).min() if rows.size else 0.0


def splits(X, rows):
    for f in range(X.shape[1]):
        values = np.unique(X[rows, f])
        for threshold in 0.5 * (values[:-1] + values[1:]):
            left = X[rows, f] <= threshold
            yield rows[left], rows[~left]


def brute_force(X, gamma, depth):
    """Optimal objective over every tree of at most `depth` <= 2 levels."""
    def stump(rows):
        return min([leaf_cost(gamma, rows)] + [leaf_cost(gamma, l) + leaf_cost(gamma, r) for l, r in splits(X, rows)])

    rows = np.arange(X.shape[0])
    if depth == 0:
        return leaf_cost(gamma, rows)
    if depth == 1:
        return stump(rows)
    return min([stump(rows)] + [stump(l) + stump(r) for l, r in splits(X, rows)])


class TestFitPolicyTree:
    """Test cases for the tree search."""

    def test_depth_zero_is_uniform_arm(self):
        gamma = np.array([[0.2, 0.1], [0.5, 0.3], [0.1, 0.4]])
        tree = fit_policy_tree(np.zeros((3, 1)), gamma, params=params(0))

        assert tree.n_nodes == 1
        assert tree.prescription[0] == best_uniform_arm(RewardsMatrix(gamma))
        assert tree.objective_value == pytest.approx(gamma.sum(axis=0).min())

    def test_four_patient_split(self):
        tree = fit_policy_tree(FOUR_X, FOUR_GAMMA, params=params(1))

        assert tree.feature[0] == 0
        assert tree.threshold[0] == pytest.approx(2.5)
        assert tree.prescription[tree.left[0]] == TreatmentArm.SAVR
        assert tree.prescription[tree.right[0]] == TreatmentArm.TAVR
        assert tree.objective_value == pytest.approx(0.4)

    def test_identical_columns_stay_trivial(self):
        gamma = np.repeat(np.random.default_rng(1).random((10, 1)), 2, axis=1)
        X = np.random.default_rng(2).normal(size=(10, 2))
        tree = fit_policy_tree(X, gamma, params=params(2))

        assert tree.objective_value == pytest.approx(gamma[:, 0].sum())
        assert tree.n_nodes == 1

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=100_000), st.integers(min_value=1, max_value=2))
    def test_exact_search_matches_brute_force(self, seed, depth):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 4, size=(8, 2)).astype(float)
        gamma = rng.random((8, 2))
        tree = fit_policy_tree(X, gamma, params=params(depth))

        assert tree.objective_value == pytest.approx(brute_force(X, gamma, depth))
        assert tree.depth <= depth

    def test_deeper_is_never_worse(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(60, 3))
        gamma = rng.random((60, 2))
        shallow = fit_policy_tree(X, gamma, params=params(2, min_leaf=3))
        deep = fit_policy_tree(X, gamma, params=params(3, min_leaf=3))

        assert deep.objective_value <= shallow.objective_value + 1e-12
        assert deep.depth <= 3

    def test_min_leaf_is_respected(self):
        rng = np.random.default_rng(6)
        X = rng.normal(size=(50, 2))
        tree = fit_policy_tree(X, rng.random((50, 2)), params=params(3, min_leaf=8))

        assert (tree.n_train[tree.leaves] >= 8).all()

    def test_deterministic_across_workers(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(40, 3))
        gamma = rng.random((40, 2))
        serial = fit_policy_tree(X, gamma, params=params(3, min_leaf=2, restarts=4, seed=9), n_jobs=1)
        parallel = fit_policy_tree(X, gamma, params=params(3, min_leaf=2, restarts=4, seed=9), n_jobs=2)

        assert tree_fingerprint(serial) == tree_fingerprint(parallel)

    def test_recovers_planted_policy(self):
        cohort, truth = generate_cohort(recovery_config(seed=3, n=400))
        tree = fit_policy_tree(
            cohort.features, truth.potential_risks, params=params(2, min_leaf=5), feature_names=cohort.schema.names
        )

        assert policy_regret(tree, truth, cohort) == pytest.approx(0.0, abs=1e-12)

    def test_input_errors(self):
        with pytest.raises(InconsistentDimensions):
            fit_policy_tree(FOUR_X, FOUR_GAMMA[:3], params=params(1))
        with pytest.raises(MissingFeature):
            fit_policy_tree(np.array([[1.0], [np.nan]]), FOUR_GAMMA[:2], params=params(1))
        with pytest.raises(InvalidConfig):
            fit_policy_tree(np.empty((0, 1)), np.empty((0, 2)), params=params(1))


class TestPrescribe:
    """Test cases for routing patients through a tree."""

    @pytest.fixture
    def four_tree(self):
        return fit_policy_tree(FOUR_X, FOUR_GAMMA, params=params(1))

    def test_depth_zero(self):
        tree = fit_policy_tree(np.zeros((2, 1)), np.array([[0.5, 0.1], [0.5, 0.1]]), params=params(0))
        assert prescribe(tree, [123.0]) == TreatmentArm.TAVR

    def test_traversal(self, four_tree):
        assert prescribe(four_tree, [1.5]) == TreatmentArm.SAVR
        assert prescribe(four_tree, {"x0": 3.5}) == TreatmentArm.TAVR

    def test_threshold_goes_left(self, four_tree):
        assert prescribe(four_tree, [2.5]) == TreatmentArm.SAVR

    def test_missing_feature(self, four_tree):
        with pytest.raises(MissingFeature):
            prescribe(four_tree, {"age": 70.0})
        with pytest.raises(MissingFeature):
            prescribe_many(four_tree, np.array([[np.nan]]))

    def test_route_reaches_leaves(self, four_tree):
        leaves = route(four_tree, FOUR_X)
        assert set(leaves) <= set(four_tree.leaves)


class TestObjective:
    """Test cases for the weighted objective."""

    def test_rowwise_argmin_tree(self):
        gamma = np.array([[0.2, 0.1], [0.3, 0.4]])
        X = np.array([[1.0], [2.0]])
        tree = fit_policy_tree(X, gamma, params=params(1))

        assert objective(tree, X, gamma) == pytest.approx(0.4)

    def test_doubling_weights_doubles_objective(self):
        rng = np.random.default_rng(3)
        X, gamma = rng.normal(size=(30, 2)), rng.random((30, 2))
        weights = rng.uniform(1.0, 2.0, 30)
        tree = fit_policy_tree(X, gamma, params=params(2, min_leaf=2))

        assert objective(tree, X, gamma, 2 * weights) == pytest.approx(2 * objective(tree, X, gamma, weights))

    def test_matches_row_lookup(self):
        rng = np.random.default_rng(4)
        X, gamma = rng.normal(size=(50, 2)), rng.random((50, 2))
        tree = fit_policy_tree(X, gamma, params=params(2, min_leaf=3))
        expected = sum(gamma[i, prescribe(tree, X[i])] for i in range(50))

        assert objective(tree, X, gamma) == pytest.approx(expected)
        assert tree.objective_value == pytest.approx(expected)

    def test_weights_change_the_tree(self):
        gamma = np.array([[0.4, 0.5], [0.4, 0.5], [0.6, 0.5]])
        X = np.zeros((3, 1))
        unweighted = fit_policy_tree(X, gamma, params=params(0))
        weighted = fit_policy_tree(X, gamma, weights=[1.0, 1.0, 5.0], params=params(0))

        assert unweighted.prescription[0] == TreatmentArm.SAVR
        assert weighted.prescription[0] == TreatmentArm.TAVR

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(min_value=0, max_value=100_000),
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=1, max_value=2),
    )
    def test_common_risk_offset_keeps_the_policy(self, seed, offset, depth):
        """Adding the same constant to both arms moves the objective by offset * n only."""
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 4, size=(12, 2)).astype(float)
        gamma = rng.integers(0, 8, size=(12, 2)) / 8.0
        base = fit_policy_tree(X, gamma, params=params(depth))
        shifted = fit_policy_tree(X, gamma + offset, params=params(depth))

        np.testing.assert_array_equal(prescribe_many(shifted, X), prescribe_many(base, X))
        assert shifted.objective_value == pytest.approx(base.objective_value + 12 * offset)


class TestExport:
    """Test cases for tree export formats."""

    @pytest.fixture
    def trained(self, small_synth):
        cohort, truth = small_synth
        tree = fit_policy_tree(
            cohort.features, truth.potential_risks, params=params(2, min_leaf=10), feature_names=cohort.schema.names
        )
        return tree, cohort, derive_labels(cohort)

    def test_json_round_trip_is_byte_identical(self, trained, tmp_path):
        tree, _, _ = trained
        text = tree_json(tree)

        assert tree_json(tree_from_dict(json.loads(text))) == text
        save_tree(tree, tmp_path / "tree.json")
        assert tree_json(load_tree(tmp_path / "tree.json")) == text

    def test_close_thresholds_survive_saving(self, tmp_path):
        X = np.array([[1.0 - 2e-13], [1.0 - 2e-13], [1.0], [1.0]])
        tree = fit_policy_tree(X, FOUR_GAMMA, params=params(1))
        save_tree(tree, tmp_path / "tree.json")
        loaded = load_tree(tmp_path / "tree.json")

        assert loaded.threshold[0] == tree.threshold[0]
        np.testing.assert_array_equal(prescribe_many(loaded, X), [0, 0, 1, 1])

    def test_depth_zero_leaf_table(self, small_synth):
        cohort, truth = small_synth
        tree = fit_policy_tree(cohort.features, truth.potential_risks, params=params(0), feature_names=cohort.schema.names)
        table = leaf_table(tree, cohort, derive_labels(cohort))

        assert list(table.columns) == LEAF_TABLE_COLUMNS
        assert len(table) == 1
        assert table.loc[0, "n_savr"] + table.loc[0, "n_tavr"] == cohort.n

    def test_leaf_mortality_matches_group_by(self, trained):
        tree, cohort, labels = trained
        table = leaf_table(tree, cohort, labels).set_index("node_id")
        frame = pd.DataFrame({"leaf": route(tree, cohort), "arm": cohort.arms, "code": label_codes(labels)})
        determinate = frame[frame["code"] >= 0]
        expected = determinate.groupby(["leaf", "arm"])["code"].mean() * 100

        for (leaf, arm), value in expected.items():
            column = "mort_savr" if arm == TreatmentArm.SAVR else "mort_tavr"
            assert table.loc[leaf, column] == pytest.approx(value)

    def test_dot_and_leaf_table_exports(self, trained):
        tree, cohort, labels = trained

        assert export_tree(tree, format="dot").startswith("digraph PolicyTree {")
        assert export_tree(tree, cohort, labels, format="leaf_table").splitlines()[0] == ",".join(LEAF_TABLE_COLUMNS)
        with pytest.raises(InvalidConfig):
            export_tree(tree, format="leaf_table")
        with pytest.raises(InvalidConfig):
            export_tree(tree, format="svg")

    def test_cohort_without_tree_feature(self):
        tree = fit_policy_tree(FOUR_X, FOUR_GAMMA, params=params(1), feature_names=["age"])
        with pytest.raises(MissingFeature):
            route(tree, make_cohort(FOUR_X, [0, 1, 0, 1]))
