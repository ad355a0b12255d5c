"""
Depth-bounded axis-aligned prescription trees.

The fitted tree minimizes sum_i w_i * gamma[i, tree(x_i)]. Every leaf
prescribes the arm with the smaller weighted gamma sum over its training
members (ties to SAVR), and x <= threshold goes left.

Search: subtrees with at most EXACT_SUBTREE_DEPTH levels are solved exactly
by exhaustive enumeration of node-local midpoint thresholds. Deeper levels
start from a greedy partition and are refined by coordinate descent: each
internal node's split is re-optimized with its subtrees held fixed, or the
node is replaced by the exact shallow subtree, until no move improves the
objective. Randomized restarts perturb the greedy start, and a depth-d fit
is never worse than the depth-(d-1) fit with the same seed.
"""

import copy
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import colorlog
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from src.cohort import BinaryLabel, Cohort, TreatmentArm, label_codes
from src.config import (
    DEFAULT_RESTARTS,
    DEFAULT_TREE_DEPTH,
    DEFAULT_TREE_MIN_LEAF,
    EXACT_SUBTREE_DEPTH,
    N_JOBS,
    TREE_FORMAT_VERSION,
)
from src.errors import InconsistentDimensions, InvalidConfig, MissingFeature

logger = colorlog.getLogger(__name__)

LEAF = -1
TOLERANCE = 1e-12
GREEDY_POOL = 5


class TreeParams(BaseModel):
    """Complexity and search settings of a policy tree fit."""

    max_depth: int = Field(DEFAULT_TREE_DEPTH, ge=0, description="Maximum depth")
    min_leaf: int = Field(DEFAULT_TREE_MIN_LEAF, ge=1, description="Minimum training patients per leaf")
    n_restarts: int = Field(DEFAULT_RESTARTS, ge=1, description="Randomized restarts of the local search")
    seed: int = Field(0, ge=0, description="Restart seed")
    exact_depth: int = Field(EXACT_SUBTREE_DEPTH, ge=0, le=2, description="Subtrees this shallow are solved exactly")


# ============================================================================
# Fitted tree
# ============================================================================

@dataclass(frozen=True, eq=False)
class PolicyTree:
    """Flat preorder tree. Leaves have feature == -1 and a prescription."""

    feature_names: Tuple[str, ...]
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    prescription: np.ndarray
    n_train: np.ndarray
    max_depth: int
    min_leaf: int
    objective_value: float
    n_restarts: int = 1
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature == LEAF)

    @property
    def depth(self) -> int:
        def _depth(node: int) -> int:
            if self.feature[node] == LEAF:
                return 0
            return 1 + max(_depth(self.left[node]), _depth(self.right[node]))
        return _depth(0)


def _matrix_for(tree: PolicyTree, features) -> np.ndarray:
    """Feature matrix in the tree's column order from an array or a cohort."""
    if isinstance(features, Cohort):
        names = features.schema.names
        missing = [name for name in tree.feature_names if name not in names]
        if missing:
            raise MissingFeature(f"cohort lacks tree feature '{missing[0]}'", stage="tree", feature=missing[0])
        return features.features[:, [names.index(name) for name in tree.feature_names]]
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != len(tree.feature_names):
        raise InconsistentDimensions(
            f"expected {len(tree.feature_names)} feature columns, got {X.shape[1]}", stage="tree"
        )
    return X


def route(tree: PolicyTree, features) -> np.ndarray:
    """Leaf node id reached by each row."""
    X = _matrix_for(tree, features)
    used = np.unique(tree.feature[tree.feature != LEAF])
    if used.size and np.isnan(X[:, used]).any():
        column = tree.feature_names[int(used[np.isnan(X[:, used]).any(axis=0)][0])]
        raise MissingFeature(f"missing value in tree feature '{column}'", stage="tree", feature=column)
    nodes = np.zeros(X.shape[0], dtype=int)
    active = tree.feature[nodes] != LEAF
    while active.any():
        rows = np.flatnonzero(active)
        current = nodes[rows]
        go_left = X[rows, tree.feature[current]] <= tree.threshold[current]
        nodes[rows] = np.where(go_left, tree.left[current], tree.right[current])
        active = tree.feature[nodes] != LEAF
    return nodes


def prescribe_many(tree: PolicyTree, features) -> np.ndarray:
    """Prescribed arm code for each row."""
    return tree.prescription[route(tree, features)].astype(np.int8)


def prescribe(tree: PolicyTree, x: Union[Mapping[str, float], Sequence[float]]) -> TreatmentArm:
    """
    Prescription for one patient.

    Args:
        tree: Fitted policy tree
        x: Feature vector in the tree's column order, or a name -> value mapping

    Returns:
        The prescribed TreatmentArm
    """
    node = 0
    while tree.feature[node] != LEAF:
        name = tree.feature_names[tree.feature[node]]
        if isinstance(x, Mapping):
            if name not in x or x[name] is None:
                raise MissingFeature(f"feature '{name}' is required by the tree", stage="tree", feature=name)
            value = float(x[name])
        else:
            value = float(x[tree.feature[node]])
        if np.isnan(value):
            raise MissingFeature(f"feature '{name}' is missing", stage="tree", feature=name)
        node = tree.left[node] if value <= tree.threshold[node] else tree.right[node]
    return TreatmentArm(int(tree.prescription[node]))


def _weights_array(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    values = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if values.shape != (n,):
        raise InconsistentDimensions(f"weights length {values.size} differs from {n} rows", stage="tree")
    return values


def _gamma_array(rewards) -> np.ndarray:
    return np.asarray(getattr(rewards, "gamma", rewards), dtype=float)


def objective(tree: PolicyTree, features, rewards, weights=None) -> float:
    """sum_i w_i * gamma[i, tree(x_i)]."""
    gamma = _gamma_array(rewards)
    X = _matrix_for(tree, features)
    if gamma.shape != (X.shape[0], 2):
        raise InconsistentDimensions(f"rewards shape {gamma.shape} does not match {X.shape[0]} rows", stage="tree")
    w = _weights_array(weights, X.shape[0])
    arms = prescribe_many(tree, X)
    return float((w * gamma[np.arange(X.shape[0]), arms]).sum())


# ============================================================================
# Search
# ============================================================================

@dataclass
class _Node:
    feature: int = LEAF
    threshold: float = 0.0
    left: Optional["_Node"] = None
    right: Optional["_Node"] = None
    arm: int = 0
    n: int = 0


class _TreeSearch:
    """Exact shallow solves, greedy starts and local search over one problem."""

    def __init__(self, X: np.ndarray, costs: np.ndarray, min_leaf: int, exact_depth: int):
        self.X = X
        self.costs = costs
        self.min_leaf = min_leaf
        self.exact_depth = exact_depth
        self.p = X.shape[1]
        self.global_orders = [np.argsort(X[:, f], kind="stable") for f in range(self.p)]
        self._cache: Dict[Tuple[bytes, int], Tuple[float, _Node]] = {}

    # -- helpers ------------------------------------------------------------

    def orders_for(self, rows: np.ndarray, parent_orders: Optional[List[np.ndarray]] = None) -> List[np.ndarray]:
        mask = np.zeros(self.X.shape[0], dtype=bool)
        mask[rows] = True
        source = parent_orders if parent_orders is not None else self.global_orders
        return [order[mask[order]] for order in source]

    def leaf(self, rows: np.ndarray) -> Tuple[float, _Node]:
        totals = self.costs[rows].sum(axis=0)
        arm = int(TreatmentArm.TAVR) if totals[1] < totals[0] else int(TreatmentArm.SAVR)
        return float(totals[arm]), _Node(arm=arm, n=rows.size)

    def candidates(self, order: np.ndarray, f: int) -> Tuple[np.ndarray, np.ndarray]:
        xs = self.X[order, f]
        positions = np.flatnonzero(xs[:-1] < xs[1:])
        sizes = positions + 1
        positions = positions[(sizes >= self.min_leaf) & (order.size - sizes >= self.min_leaf)]
        return positions, 0.5 * (xs[positions] + xs[positions + 1])

    def _split_node(self, f: int, threshold: float, left: _Node, right: _Node) -> _Node:
        return _Node(feature=f, threshold=float(threshold), left=left, right=right, n=left.n + right.n)

    # -- exact shallow solves -------------------------------------------------

    def stump(self, orders: List[np.ndarray]) -> Tuple[float, _Node]:
        rows = orders[0]
        best_cost, best = self.leaf(rows)
        best_split = None
        for f in range(self.p):
            order = orders[f]
            positions, thresholds = self.candidates(order, f)
            if positions.size == 0:
                continue
            cumulative = np.cumsum(self.costs[order], axis=0)
            left = cumulative[positions]
            right = cumulative[-1] - left
            split_costs = left.min(axis=1) + right.min(axis=1)
            i = int(np.argmin(split_costs))
            if split_costs[i] < best_cost - TOLERANCE:
                best_cost = float(split_costs[i])
                best_split = (f, positions[i], thresholds[i], order)
        if best_split is None:
            return best_cost, best
        f, position, threshold, order = best_split
        _, left_leaf = self.leaf(order[: position + 1])
        _, right_leaf = self.leaf(order[position + 1:])
        return best_cost, self._split_node(f, threshold, left_leaf, right_leaf)

    def depth_two(self, orders: List[np.ndarray]) -> Tuple[float, _Node]:
        best_cost, best = self.stump(orders)
        rows = orders[0]
        row_floor = self.costs.min(axis=1)
        floor = float(row_floor[rows].sum())
        for f in range(self.p):
            if best_cost <= floor + TOLERANCE:
                break
            order = orders[f]
            positions, thresholds = self.candidates(order, f)
            floor_cumulative = np.cumsum(row_floor[order])
            for position, threshold in zip(positions, thresholds):
                left_cost, left_node = self.stump(self.orders_for(order[: position + 1], orders))
                # no subtree beats every patient's cheaper arm
                right_floor = floor_cumulative[-1] - floor_cumulative[position]
                if left_cost + right_floor >= best_cost - TOLERANCE:
                    continue
                right_cost, right_node = self.stump(self.orders_for(order[position + 1:], orders))
                if left_cost + right_cost < best_cost - TOLERANCE:
                    best_cost = left_cost + right_cost
                    best = self._split_node(f, threshold, left_node, right_node)
        return best_cost, best

    def exact(self, rows: np.ndarray, depth: int, orders: Optional[List[np.ndarray]] = None) -> Tuple[float, _Node]:
        """Optimal subtree of at most `depth` (<= 2) levels for these rows."""
        depth = min(depth, self.exact_depth)
        key = (np.sort(rows).tobytes(), depth)
        if key not in self._cache:
            if depth == 0:
                result = self.leaf(rows)
            else:
                orders = orders if orders is not None else self.orders_for(rows)
                result = self.stump(orders) if depth == 1 else self.depth_two(orders)
            self._cache[key] = result
        cost, node = self._cache[key]
        return cost, copy.deepcopy(node)

    # -- evaluation -----------------------------------------------------------

    def cost(self, node: _Node, rows: np.ndarray, is_root: bool = False) -> float:
        """Objective of a fixed structure on rows (inf if a leaf is too small)."""
        if node.feature == LEAF:
            if rows.size < self.min_leaf and not is_root:
                return np.inf
            totals = self.costs[rows].sum(axis=0)
            return float(totals.min())
        go_left = self.X[rows, node.feature] <= node.threshold
        return self.cost(node.left, rows[go_left]) + self.cost(node.right, rows[~go_left])

    def commit(self, node: _Node, rows: np.ndarray) -> None:
        """Set leaf arms and training counts for the rows reaching each node."""
        node.n = rows.size
        if node.feature == LEAF:
            totals = self.costs[rows].sum(axis=0)
            node.arm = int(TreatmentArm.TAVR) if totals[1] < totals[0] else int(TreatmentArm.SAVR)
            return
        go_left = self.X[rows, node.feature] <= node.threshold
        self.commit(node.left, rows[go_left])
        self.commit(node.right, rows[~go_left])

    # -- greedy start ---------------------------------------------------------

    def greedy(self, rows: np.ndarray, depth: int, rng: Optional[np.random.Generator]) -> _Node:
        if depth <= self.exact_depth:
            return self.exact(rows, depth)[1]
        orders = self.orders_for(rows)
        pool = []
        for f in range(self.p):
            order = orders[f]
            positions, thresholds = self.candidates(order, f)
            if positions.size == 0:
                continue
            cumulative = np.cumsum(self.costs[order], axis=0)
            left = cumulative[positions]
            right = cumulative[-1] - left
            split_costs = left.min(axis=1) + right.min(axis=1)
            for i in np.argsort(split_costs, kind="stable")[:GREEDY_POOL]:
                pool.append((float(split_costs[i]), f, positions[i], thresholds[i], order))
        if not pool:
            return self.leaf(rows)[1]
        pool.sort(key=lambda item: (item[0], item[1], item[2]))
        pool = pool[:GREEDY_POOL]
        choice = pool[0] if rng is None else pool[int(rng.integers(len(pool)))]
        _, f, position, threshold, order = choice
        left = self.greedy(order[: position + 1], depth - 1, rng)
        right = self.greedy(order[position + 1:], depth - 1, rng)
        return self._split_node(f, threshold, left, right)

    # -- local search ---------------------------------------------------------

    def _walk(self, node: _Node, rows: np.ndarray, depth: int):
        yield node, rows, depth
        if node.feature != LEAF:
            go_left = self.X[rows, node.feature] <= node.threshold
            yield from self._walk(node.left, rows[go_left], depth - 1)
            yield from self._walk(node.right, rows[~go_left], depth - 1)

    def _improve_node(self, node: _Node, rows: np.ndarray, depth: int, is_root: bool) -> bool:
        current = self.cost(node, rows, is_root)
        best_cost, best_move = current, None

        exact_cost, exact_node = self.exact(rows, depth)
        if exact_cost < best_cost - TOLERANCE:
            best_cost, best_move = exact_cost, ("replace", exact_node)

        if depth > self.exact_depth and node.feature != LEAF:
            orders = self.orders_for(rows)
            row_floor = self.costs.min(axis=1)
            for f in range(self.p):
                order = orders[f]
                positions, thresholds = self.candidates(order, f)
                floor_cumulative = np.cumsum(row_floor[order])
                for position, threshold in zip(positions, thresholds):
                    left_rows, right_rows = order[: position + 1], order[position + 1:]
                    value = self.cost(node.left, left_rows)
                    if value + floor_cumulative[-1] - floor_cumulative[position] >= best_cost - TOLERANCE:
                        continue
                    value += self.cost(node.right, right_rows)
                    if value < best_cost - TOLERANCE:
                        best_cost, best_move = value, ("split", f, float(threshold))

        if best_move is None:
            return False
        if best_move[0] == "replace":
            replacement = best_move[1]
            node.feature, node.threshold = replacement.feature, replacement.threshold
            node.left, node.right, node.arm = replacement.left, replacement.right, replacement.arm
        else:
            node.feature, node.threshold = best_move[1], best_move[2]
        return True

    def local_search(self, root: _Node, rows: np.ndarray, depth: int) -> _Node:
        improved = True
        while improved:
            improved = False
            for node, node_rows, node_depth in list(self._walk(root, rows, depth)):
                if self._improve_node(node, node_rows, node_depth, is_root=node is root):
                    improved = True
                    break
        return root


def _run_restart(search: _TreeSearch, rows: np.ndarray, depth: int, seed: int, restart: int) -> Tuple[float, _Node]:
    rng = None if restart == 0 else np.random.default_rng([seed, restart])
    root = search.greedy(rows, depth, rng)
    root = search.local_search(root, rows, depth)
    return search.cost(root, rows, is_root=True), root


def _solve(search: _TreeSearch, rows: np.ndarray, params: TreeParams, n_jobs: Optional[int]) -> Tuple[float, _Node]:
    depth = params.max_depth
    if depth <= params.exact_depth:
        return search.exact(rows, depth)

    restarts = Parallel(n_jobs=n_jobs or N_JOBS, prefer="threads")(
        delayed(_run_restart)(search, rows, depth, params.seed, r) for r in range(params.n_restarts)
    )
    best_cost, best_root = restarts[0]
    for cost, root in restarts[1:]:
        if cost < best_cost - TOLERANCE:
            best_cost, best_root = cost, root

    # never worse than the shallower fit
    shallower = params.model_copy(update={"max_depth": depth - 1})
    shallow_cost, shallow_root = _solve(search, rows, shallower, n_jobs)
    if shallow_cost <= best_cost + TOLERANCE:
        return shallow_cost, shallow_root
    return best_cost, best_root


def _flatten(root: _Node, feature_names: Sequence[str], params: TreeParams, objective_value: float) -> PolicyTree:
    feature, threshold, left, right, prescription, n_train = [], [], [], [], [], []

    def visit(node: _Node) -> int:
        index = len(feature)
        feature.append(node.feature)
        threshold.append(node.threshold if node.feature != LEAF else 0.0)
        left.append(LEAF)
        right.append(LEAF)
        prescription.append(node.arm if node.feature == LEAF else LEAF)
        n_train.append(node.n)
        if node.feature != LEAF:
            left[index] = visit(node.left)
            right[index] = visit(node.right)
        return index

    visit(root)
    return PolicyTree(
        feature_names=tuple(feature_names),
        feature=np.array(feature, dtype=int),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        prescription=np.array(prescription, dtype=int),
        n_train=np.array(n_train, dtype=int),
        max_depth=params.max_depth,
        min_leaf=params.min_leaf,
        objective_value=float(objective_value),
        n_restarts=params.n_restarts,
        seed=params.seed,
    )


def fit_policy_tree(
    features: np.ndarray,
    rewards,
    weights=None,
    params: Optional[TreeParams] = None,
    feature_names: Optional[Sequence[str]] = None,
    n_jobs: Optional[int] = None,
) -> PolicyTree:
    """
    Fit a prescription tree minimizing sum_i w_i * gamma[i, tree(x_i)].

    Args:
        features: N x p complete feature matrix
        rewards: RewardsMatrix or N x 2 array of predicted risks
        weights: WeightVector, N weights, or None for unit weights
        params: Depth, leaf size, restarts and seed
        feature_names: Column names (default x0..x{p-1})
        n_jobs: Parallel workers over restarts

    Returns:
        Fitted PolicyTree
    """
    params = params or TreeParams()
    X = np.atleast_2d(np.asarray(features, dtype=float))
    gamma = _gamma_array(rewards)
    if gamma.shape != (X.shape[0], 2):
        raise InconsistentDimensions(
            f"rewards shape {gamma.shape} does not match {X.shape[0]} feature rows", stage="tree"
        )
    if np.isnan(X).any():
        raise MissingFeature("policy trees need imputed features", stage="tree")
    w = _weights_array(weights, X.shape[0])
    if X.shape[0] == 0:
        raise InvalidConfig("cannot fit a policy tree on zero patients", stage="tree")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise InconsistentDimensions("feature_names length differs from feature columns", stage="tree")

    search = _TreeSearch(X, w[:, None] * gamma, params.min_leaf, params.exact_depth)
    rows = np.arange(X.shape[0])
    _, root = _solve(search, rows, params, n_jobs)
    search.commit(root, rows)

    tree = _flatten(root, names, params, 0.0)
    value = objective(tree, X, gamma, w)
    tree = _flatten(root, names, params, value)
    logger.info(
        f"Fitted policy tree: depth {tree.depth}, {tree.leaves.size} leaves, objective {value:.6f}"
    )
    return tree


# ============================================================================
# Export
# ============================================================================

def _sig12(value: float) -> float:
    return float(f"{value:.12g}")


def tree_to_dict(tree: PolicyTree) -> dict:
    nodes = []
    for i in range(tree.n_nodes):
        leaf = tree.feature[i] == LEAF
        nodes.append({
            "id": i,
            "feature": None if leaf else tree.feature_names[tree.feature[i]],
            "threshold": None if leaf else float(tree.threshold[i]),
            "left": None if leaf else int(tree.left[i]),
            "right": None if leaf else int(tree.right[i]),
            "prescription": TreatmentArm(int(tree.prescription[i])).name if leaf else None,
            "n_train": int(tree.n_train[i]),
        })
    return {
        "format_version": TREE_FORMAT_VERSION,
        "feature_names": list(tree.feature_names),
        "max_depth": tree.max_depth,
        "min_leaf": tree.min_leaf,
        "n_restarts": tree.n_restarts,
        "seed": tree.seed,
        "objective_value": _sig12(tree.objective_value),
        "nodes": nodes,
    }


def tree_from_dict(document: dict) -> PolicyTree:
    if document.get("format_version") != TREE_FORMAT_VERSION:
        raise InvalidConfig("unsupported policy tree format", stage="tree")
    names = list(document["feature_names"])
    nodes = sorted(document["nodes"], key=lambda node: node["id"])
    leaf = [node["feature"] is None for node in nodes]
    return PolicyTree(
        feature_names=tuple(names),
        feature=np.array([LEAF if is_leaf else names.index(n["feature"]) for n, is_leaf in zip(nodes, leaf)], dtype=int),
        threshold=np.array([0.0 if is_leaf else n["threshold"] for n, is_leaf in zip(nodes, leaf)], dtype=float),
        left=np.array([LEAF if is_leaf else n["left"] for n, is_leaf in zip(nodes, leaf)], dtype=int),
        right=np.array([LEAF if is_leaf else n["right"] for n, is_leaf in zip(nodes, leaf)], dtype=int),
        prescription=np.array(
            [int(TreatmentArm[n["prescription"]]) if is_leaf else LEAF for n, is_leaf in zip(nodes, leaf)], dtype=int
        ),
        n_train=np.array([n["n_train"] for n in nodes], dtype=int),
        max_depth=int(document["max_depth"]),
        min_leaf=int(document["min_leaf"]),
        objective_value=float(document["objective_value"]),
        n_restarts=int(document.get("n_restarts", 1)),
        seed=int(document.get("seed", 0)),
    )


def tree_json(tree: PolicyTree) -> str:
    return json.dumps(tree_to_dict(tree), indent=2, sort_keys=True) + "\n"


def tree_fingerprint(tree: PolicyTree) -> str:
    """sha256 of the tree's JSON export."""
    return hashlib.sha256(tree_json(tree).encode("utf-8")).hexdigest()


def tree_dot(tree: PolicyTree) -> str:
    """Graphviz DOT text: one node per tree node, leaves labeled with the prescription."""
    lines = ["digraph PolicyTree {", '  node [shape=box, fontname="Helvetica"];']
    for i in range(tree.n_nodes):
        if tree.feature[i] == LEAF:
            arm = TreatmentArm(int(tree.prescription[i])).name
            lines.append(f'  n{i} [label="{arm}\\nn={int(tree.n_train[i])}", shape=ellipse];')
        else:
            name = tree.feature_names[tree.feature[i]]
            lines.append(f'  n{i} [label="{name} <= {tree.threshold[i]:.12g}"];')
    for i in range(tree.n_nodes):
        if tree.feature[i] != LEAF:
            lines.append(f'  n{i} -> n{int(tree.left[i])} [label="yes"];')
            lines.append(f'  n{i} -> n{int(tree.right[i])} [label="no"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


LEAF_TABLE_COLUMNS = ["node_id", "prescribed", "n_savr", "pct_savr", "mort_savr", "n_tavr", "pct_tavr", "mort_tavr"]


def leaf_table(tree: PolicyTree, cohort: Cohort, labels: Sequence[BinaryLabel]) -> pd.DataFrame:
    """
    Per-leaf summary of a cohort routed through the tree.

    For each received arm: patient count, share of the leaf (%), and observed
    horizon mortality (%) over patients with a determinate label.
    """
    leaves = route(tree, cohort)
    codes = label_codes(labels)
    records = []
    for leaf in tree.leaves:
        members = leaves == leaf
        total = int(members.sum())
        record = {"node_id": int(leaf), "prescribed": TreatmentArm(int(tree.prescription[leaf])).name}
        for arm in TreatmentArm:
            key = arm.name.lower()
            in_arm = members & (cohort.arms == arm)
            determinate = in_arm & (codes >= 0)
            n_determinate = int(determinate.sum())
            record[f"n_{key}"] = int(in_arm.sum())
            record[f"pct_{key}"] = 100.0 * in_arm.sum() / total if total else float("nan")
            record[f"mort_{key}"] = (
                100.0 * (codes[determinate] == 1).sum() / n_determinate if n_determinate else float("nan")
            )
        records.append(record)
    return pd.DataFrame.from_records(records, columns=LEAF_TABLE_COLUMNS)


def export_tree(
    tree: PolicyTree,
    cohort: Optional[Cohort] = None,
    labels: Optional[Sequence[BinaryLabel]] = None,
    format: str = "json",
) -> str:
    """Render a tree as JSON, DOT, or the leaf-table CSV."""
    if format == "json":
        return tree_json(tree)
    if format == "dot":
        return tree_dot(tree)
    if format == "leaf_table":
        if cohort is None or labels is None:
            raise InvalidConfig("leaf_table export needs a cohort and labels", stage="tree")
        buffer = io.StringIO()
        leaf_table(tree, cohort, labels).to_csv(buffer, index=False, float_format="%.12g")
        return buffer.getvalue()
    raise InvalidConfig(f"unknown export format '{format}'", stage="tree")


def save_tree(tree: PolicyTree, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(tree_json(tree), encoding="utf-8")


def load_tree(path: Union[str, Path]) -> PolicyTree:
    with open(path, "r", encoding="utf-8") as f:
        return tree_from_dict(json.load(f))
