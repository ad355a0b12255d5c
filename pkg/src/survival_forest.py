"""
Random survival forest for right-censored outcomes.

Trees are grown on bootstrap samples with mtry candidate features per node,
splitting on the maximal log-rank statistic over midpoints of sorted unique
values. Leaves hold Nelson-Aalen cumulative hazards; the forest averages leaf
hazards across trees and maps them to horizon mortality risk 1 - exp(-H).

Tree t draws all of its randomness from default_rng(seed ^ t), so fitted
forests do not depend on how trees are scheduled across workers. When some
patient would be in-bag for every tree, the seed is redrawn from
SeedSequence([seed, attempt]) so out-of-bag predictions cover the cohort.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import colorlog
import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from src.cohort import Cohort
from src.config import (
    DEFAULT_FOREST_MAX_DEPTH,
    DEFAULT_FOREST_MIN_LEAF,
    DEFAULT_HORIZON_DAYS,
    DEFAULT_N_TREES,
    FOREST_FORMAT_VERSION,
    N_JOBS,
    OOB_RESEED_ATTEMPTS,
)
from src.errors import (
    InvalidConfig,
    MissingFeature,
    NoComparablePairs,
    NoEvents,
    SchemaMismatch,
    TooFewRows,
)

logger = colorlog.getLogger(__name__)

LEAF = -1


class ForestParams(BaseModel):
    """Hyperparameters of a survival forest."""

    n_trees: int = Field(DEFAULT_N_TREES, ge=1, description="Number of trees")
    mtry: Optional[int] = Field(None, ge=1, description="Features tried per node (default ceil(sqrt(p)))")
    max_depth: Optional[int] = Field(DEFAULT_FOREST_MAX_DEPTH, ge=0, description="None = unlimited")
    min_leaf: int = Field(DEFAULT_FOREST_MIN_LEAF, ge=1, description="Minimum samples per leaf")
    seed: int = Field(0, ge=0, description="Forest seed")


# ============================================================================
# Nelson-Aalen
# ============================================================================

@dataclass(frozen=True, eq=False)
class HazardCurve:
    """Right-continuous step function H(t) on ascending event times."""

    times: np.ndarray
    cumulative_hazard: np.ndarray

    def at(self, t) -> np.ndarray:
        if self.times.size == 0:
            return np.zeros_like(np.asarray(t, dtype=float))
        index = np.searchsorted(self.times, t, side="right") - 1
        return np.where(index >= 0, self.cumulative_hazard[np.maximum(index, 0)], 0.0)

    def survival(self, t) -> np.ndarray:
        return np.exp(-self.at(t))


EMPTY_CURVE = HazardCurve(np.empty(0), np.empty(0))


def nelson_aalen(times: np.ndarray, events: np.ndarray) -> HazardCurve:
    """H(t) = sum over event times t_j <= t of d_j / n_j."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    event_times, deaths = np.unique(times[events], return_counts=True)
    if event_times.size == 0:
        return EMPTY_CURVE
    sorted_times = np.sort(times)
    at_risk = sorted_times.size - np.searchsorted(sorted_times, event_times, side="left")
    return HazardCurve(event_times, np.cumsum(deaths / at_risk))


# ============================================================================
# Log-rank splitting
# ============================================================================

def logrank_scores(
    x: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    min_leaf: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Squared log-rank statistic for every midpoint threshold on one feature.

    Returns:
        (thresholds, statistics); thresholds whose split has zero variance or
        violates min_leaf are omitted
    """
    n = x.size
    event_times = np.unique(times[events])
    if event_times.size == 0 or n < 2:
        return np.empty(0), np.empty(0)

    at_risk = times[:, None] >= event_times[None, :]
    deaths = (times[:, None] == event_times[None, :]) & events[:, None]
    total_at_risk = at_risk.sum(axis=0).astype(float)
    total_deaths = deaths.sum(axis=0).astype(float)

    order = np.argsort(x, kind="stable")
    xs = x[order]
    positions = np.flatnonzero(xs[:-1] < xs[1:])
    left_sizes = positions + 1
    positions = positions[(left_sizes >= min_leaf) & (n - left_sizes >= min_leaf)]
    if positions.size == 0:
        return np.empty(0), np.empty(0)

    left_at_risk = np.cumsum(at_risk[order], axis=0)[positions].astype(float)
    left_deaths = np.cumsum(deaths[order], axis=0)[positions].astype(float)

    share = left_at_risk / total_at_risk
    numerator = (left_deaths - share * total_deaths).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        spread = np.where(
            total_at_risk > 1,
            (total_at_risk - total_deaths) / (total_at_risk - 1),
            0.0,
        )
    variance = (share * (1.0 - share) * spread * total_deaths).sum(axis=1)

    usable = variance > 0
    thresholds = 0.5 * (xs[positions] + xs[positions + 1])
    return thresholds[usable], numerator[usable] ** 2 / variance[usable]


def best_split(
    X: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    features: Sequence[int],
    min_leaf: int = 1,
) -> Optional[Tuple[int, float, float]]:
    """
    Best (feature, threshold, statistic) among the given features.

    Ties keep the earliest feature in `features` and the lowest threshold.
    """
    best = None
    for feature in features:
        thresholds, statistics = logrank_scores(X[:, feature], times, events, min_leaf)
        if statistics.size == 0:
            continue
        i = int(np.argmax(statistics))
        if best is None or statistics[i] > best[2]:
            best = (int(feature), float(thresholds[i]), float(statistics[i]))
    return best


# ============================================================================
# Trees
# ============================================================================

@dataclass(frozen=True, eq=False)
class SurvivalTree:
    """Flat binary tree; leaves carry Nelson-Aalen curves."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_samples: np.ndarray
    curves: Dict[int, HazardCurve]
    max_depth: Optional[int]
    min_leaf: int

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for each row (x <= threshold goes left)."""
        nodes = np.zeros(X.shape[0], dtype=int)
        active = self.feature[nodes] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[nodes] != LEAF
        return nodes

    def cumulative_hazard(self, X: np.ndarray, t: float) -> np.ndarray:
        leaves = self.apply(X)
        values = np.empty(X.shape[0])
        for leaf in np.unique(leaves):
            values[leaves == leaf] = self.curves[int(leaf)].at(t)
        return values


def _grow_tree(
    X: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    mtry: int,
    max_depth: Optional[int],
    min_leaf: int,
    rng: np.random.Generator,
) -> SurvivalTree:
    feature, threshold, left, right, n_samples = [], [], [], [], []
    curves: Dict[int, HazardCurve] = {}

    def new_node(rows: np.ndarray) -> int:
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        n_samples.append(rows.size)
        return len(feature) - 1

    root_rows = np.arange(X.shape[0])
    stack = [(new_node(root_rows), root_rows, 0)]
    p = X.shape[1]
    while stack:
        node, rows, depth = stack.pop()
        split = None
        can_split = (
            (max_depth is None or depth < max_depth)
            and rows.size >= 2 * min_leaf
            and events[rows].any()
        )
        if can_split:
            candidates = rng.choice(p, size=mtry, replace=False)
            split = best_split(X[rows], times[rows], events[rows], candidates, min_leaf)

        if split is None:
            curves[node] = nelson_aalen(times[rows], events[rows])
            continue

        f, thr, _ = split
        goes_left = X[rows, f] <= thr
        left_rows, right_rows = rows[goes_left], rows[~goes_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        stack.append((right[node], right_rows, depth + 1))
        stack.append((left[node], left_rows, depth + 1))

    return SurvivalTree(
        feature=np.array(feature, dtype=int),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        n_samples=np.array(n_samples, dtype=int),
        curves=curves,
        max_depth=max_depth,
        min_leaf=min_leaf,
    )


def _draw_bootstrap(rng: np.random.Generator, n: int, probabilities: Optional[np.ndarray]) -> np.ndarray:
    return np.sort(rng.choice(n, size=n, replace=True, p=probabilities))


def _uncovered(seed: int, n: int, n_trees: int, probabilities: Optional[np.ndarray]) -> int:
    """Patients that would be in-bag for every tree under this seed."""
    covered = np.zeros(n, dtype=bool)
    for tree_index in range(n_trees):
        rng = np.random.default_rng(seed ^ tree_index)
        covered[np.setdiff1d(np.arange(n), _draw_bootstrap(rng, n, probabilities))] = True
    return int((~covered).sum())


def _oob_covering_seed(seed: int, n: int, n_trees: int, probabilities: Optional[np.ndarray]) -> int:
    """
    First of seed, SeedSequence([seed, 1]), SeedSequence([seed, 2]), ... whose
    bootstraps leave every patient out-of-bag at least once.

    Falls back to the candidate with the fewest uncovered patients when no
    attempt covers everyone (forests with very few trees).
    """
    best_seed, best_uncovered = seed, None
    for attempt in range(OOB_RESEED_ATTEMPTS + 1):
        candidate = seed if attempt == 0 else int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        uncovered = _uncovered(candidate, n, n_trees, probabilities)
        if uncovered == 0:
            if attempt:
                logger.info(f"Redrew forest seed (attempt {attempt}) so every patient is out-of-bag at least once")
            return candidate
        if best_uncovered is None or uncovered < best_uncovered:
            best_seed, best_uncovered = candidate, uncovered
    logger.warning(
        f"{best_uncovered} patients stay in-bag for all {n_trees} trees after "
        f"{OOB_RESEED_ATTEMPTS} redraws; they are excluded from OOB concordance"
    )
    return best_seed


def _fit_tree(
    X: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    tree_index: int,
    seed: int,
    mtry: int,
    max_depth: Optional[int],
    min_leaf: int,
    sampling_probabilities: Optional[np.ndarray],
) -> Tuple[SurvivalTree, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed ^ tree_index)
    n = X.shape[0]
    bootstrap = _draw_bootstrap(rng, n, sampling_probabilities)
    tree = _grow_tree(X[bootstrap], times[bootstrap], events[bootstrap], mtry, max_depth, min_leaf, rng)
    oob = np.setdiff1d(np.arange(n), bootstrap)
    return tree, bootstrap, oob


# ============================================================================
# Forest
# ============================================================================

@dataclass(frozen=True, eq=False)
class SurvivalForest:
    trees: Tuple[SurvivalTree, ...]
    params: ForestParams
    mtry: int
    feature_names: Tuple[str, ...]
    n_train: int
    oob_indices: Tuple[np.ndarray, ...]
    bootstrap_indices: Optional[Tuple[np.ndarray, ...]] = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def seed(self) -> int:
        return self.params.seed


def _complete_matrix(cohort: Cohort) -> np.ndarray:
    if cohort.missing_mask.any():
        raise MissingFeature("survival forests need imputed features", stage="fit-risk")
    return np.asarray(cohort.features, dtype=float)


def fit_forest(
    cohort: Cohort,
    params: Optional[ForestParams] = None,
    sample_weights: Optional[np.ndarray] = None,
    n_jobs: Optional[int] = None,
) -> SurvivalForest:
    """
    Fit a random survival forest.

    Args:
        cohort: Imputed cohort (typically one treatment arm)
        params: Forest hyperparameters
        sample_weights: Optional positive weights; bootstrap draws are
            proportional to them
        n_jobs: Parallel workers over trees

    Returns:
        Fitted SurvivalForest
    """
    params = params or ForestParams()
    X = _complete_matrix(cohort)
    n, p = X.shape
    if n < 2 * params.min_leaf:
        raise TooFewRows(f"{n} rows, need at least {2 * params.min_leaf}", stage="fit-risk")
    if not cohort.events.any():
        raise NoEvents("no observed events; survival cannot be estimated", stage="fit-risk")

    mtry = params.mtry or int(np.ceil(np.sqrt(p)))
    if not 1 <= mtry <= p:
        raise InvalidConfig(f"mtry must be in [1, {p}], got {mtry}", stage="fit-risk")

    probabilities = None
    if sample_weights is not None:
        weights = np.asarray(sample_weights, dtype=float)
        if weights.shape != (n,) or (weights <= 0).any():
            raise InvalidConfig("sample_weights must be N positive numbers", stage="fit-risk")
        probabilities = weights / weights.sum()

    seed = _oob_covering_seed(params.seed, n, params.n_trees, probabilities)
    if seed != params.seed:
        params = params.model_copy(update={"seed": seed})

    times = np.asarray(cohort.times, dtype=float)
    events = np.asarray(cohort.events, dtype=bool)
    results = Parallel(n_jobs=n_jobs or N_JOBS)(
        delayed(_fit_tree)(
            X, times, events, tree_index, params.seed, mtry,
            params.max_depth, params.min_leaf, probabilities,
        )
        for tree_index in range(params.n_trees)
    )

    forest = SurvivalForest(
        trees=tuple(r[0] for r in results),
        params=params,
        mtry=mtry,
        feature_names=tuple(cohort.schema.names),
        n_train=n,
        oob_indices=tuple(r[2] for r in results),
        bootstrap_indices=tuple(r[1] for r in results),
    )
    logger.info(
        f"Fitted {params.n_trees} survival trees on {n} patients "
        f"({int(events.sum())} events, mtry={mtry}, min_leaf={params.min_leaf})"
    )
    return forest


def _check_features(forest: SurvivalForest, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != len(forest.feature_names):
        raise SchemaMismatch(
            f"expected {len(forest.feature_names)} features, got {X.shape[1]}", stage="rewards"
        )
    if np.isnan(X).any():
        raise MissingFeature("prediction needs complete feature vectors", stage="rewards")
    return X


def predict_cumulative_hazard(
    forest: SurvivalForest,
    X: np.ndarray,
    horizon_days: float,
    n_jobs: Optional[int] = None,
) -> np.ndarray:
    """Forest-averaged cumulative hazard at the horizon for each row."""
    X = _check_features(forest, X)
    per_tree = Parallel(n_jobs=n_jobs or N_JOBS)(
        delayed(tree.cumulative_hazard)(X, horizon_days) for tree in forest.trees
    )
    return np.mean(np.vstack(per_tree), axis=0)


def predict_risks(
    forest: SurvivalForest,
    X: np.ndarray,
    horizon_days: float = DEFAULT_HORIZON_DAYS,
    n_jobs: Optional[int] = None,
) -> np.ndarray:
    """Mortality risk 1 - exp(-H(horizon)) for each row."""
    return 1.0 - np.exp(-predict_cumulative_hazard(forest, X, horizon_days, n_jobs))


def predict_risk(forest: SurvivalForest, x: np.ndarray, horizon_days: float = DEFAULT_HORIZON_DAYS) -> float:
    """Mortality risk at the horizon for a single complete feature vector."""
    return float(predict_risks(forest, np.asarray(x, dtype=float).reshape(1, -1), horizon_days)[0])


# ============================================================================
# Concordance
# ============================================================================

def harrell_c(times: np.ndarray, events: np.ndarray, risk: np.ndarray) -> float:
    """
    Harrell's concordance index.

    Comparable pairs (i, j) have time_i < time_j with an event at time_i;
    the pair is concordant when risk_i > risk_j and counts 0.5 on ties.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    risk = np.asarray(risk, dtype=float)

    concordant = 0.0
    comparable = 0
    for i in np.flatnonzero(events):
        later = times > times[i]
        count = int(later.sum())
        if count == 0:
            continue
        comparable += count
        concordant += (risk[i] > risk[later]).sum() + 0.5 * (risk[i] == risk[later]).sum()
    if comparable == 0:
        raise NoComparablePairs("no comparable pairs for concordance", stage="fit-risk")
    return float(concordant / comparable)


def oob_risks(forest: SurvivalForest, cohort: Cohort, horizon_days: float = DEFAULT_HORIZON_DAYS) -> np.ndarray:
    """Out-of-bag risk per training patient (NaN where a patient was in every bootstrap)."""
    X = _complete_matrix(cohort)
    if X.shape[0] != forest.n_train:
        raise SchemaMismatch("OOB predictions need the forest's own training cohort", stage="fit-risk")
    total = np.zeros(X.shape[0])
    counts = np.zeros(X.shape[0])
    for tree, oob in zip(forest.trees, forest.oob_indices):
        if oob.size == 0:
            continue
        total[oob] += tree.cumulative_hazard(X[oob], horizon_days)
        counts[oob] += 1
    with np.errstate(invalid="ignore"):
        hazard = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    return 1.0 - np.exp(-hazard)


def oob_concordance(forest: SurvivalForest, cohort: Cohort, horizon_days: float = DEFAULT_HORIZON_DAYS) -> float:
    """Harrell's C of out-of-bag risk predictions on the training cohort."""
    risk = oob_risks(forest, cohort, horizon_days)
    covered = ~np.isnan(risk)
    if not covered.all():
        logger.warning(f"{int((~covered).sum())} patients were in-bag for every tree; excluded from OOB C")
    return harrell_c(cohort.times[covered], cohort.events[covered], risk[covered])


def tune_min_leaf(
    cohort: Cohort,
    params: ForestParams,
    grid: Sequence[int],
    horizon_days: float = DEFAULT_HORIZON_DAYS,
    n_jobs: Optional[int] = None,
) -> Tuple[int, Dict[int, float]]:
    """
    Pick min_leaf by OOB concordance over a small grid.

    Returns:
        (best min_leaf, {min_leaf: OOB C}); ties go to the larger leaf
    """
    scores = {}
    for min_leaf in sorted(grid):
        forest = fit_forest(cohort, params.model_copy(update={"min_leaf": min_leaf}), n_jobs=n_jobs)
        scores[min_leaf] = oob_concordance(forest, cohort, horizon_days)
        logger.info(f"min_leaf={min_leaf}: OOB C={scores[min_leaf]:.4f}")
    best = max(scores, key=lambda leaf: (scores[leaf], leaf))
    return best, scores


# ============================================================================
# Persistence
# ============================================================================

def _tree_to_dict(tree: SurvivalTree) -> dict:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "n_samples": tree.n_samples.tolist(),
        "curves": {
            str(node): {"times": curve.times.tolist(), "cumulative_hazard": curve.cumulative_hazard.tolist()}
            for node, curve in sorted(tree.curves.items())
        },
    }


def _tree_from_dict(data: dict, params: ForestParams) -> SurvivalTree:
    return SurvivalTree(
        feature=np.array(data["feature"], dtype=int),
        threshold=np.array(data["threshold"], dtype=float),
        left=np.array(data["left"], dtype=int),
        right=np.array(data["right"], dtype=int),
        n_samples=np.array(data["n_samples"], dtype=int),
        curves={
            int(node): HazardCurve(np.array(c["times"], dtype=float), np.array(c["cumulative_hazard"], dtype=float))
            for node, c in data["curves"].items()
        },
        max_depth=params.max_depth,
        min_leaf=params.min_leaf,
    )


def forest_to_dict(forest: SurvivalForest) -> dict:
    return {
        "format_version": FOREST_FORMAT_VERSION,
        "params": forest.params.model_dump(mode="json"),
        "mtry": forest.mtry,
        "feature_names": list(forest.feature_names),
        "n_train": forest.n_train,
        "oob_indices": [oob.tolist() for oob in forest.oob_indices],
        "trees": [_tree_to_dict(tree) for tree in forest.trees],
    }


def forest_fingerprint(forest: SurvivalForest) -> str:
    """sha256 of the forest's canonical JSON document."""
    canonical = json.dumps(forest_to_dict(forest), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_forest(forest: SurvivalForest, path: Union[str, Path]) -> None:
    """Write a forest as versioned JSON."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(forest_to_dict(forest), f, sort_keys=True, separators=(",", ":"))


def load_forest(path: Union[str, Path]) -> SurvivalForest:
    """Read a forest written by save_forest."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data.get("format_version") != FOREST_FORMAT_VERSION:
        raise InvalidConfig(f"unsupported forest format in {path}", path=str(path))
    params = ForestParams.model_validate(data["params"])
    return SurvivalForest(
        trees=tuple(_tree_from_dict(t, params) for t in data["trees"]),
        params=params,
        mtry=int(data["mtry"]),
        feature_names=tuple(data["feature_names"]),
        n_train=int(data["n_train"]),
        oob_indices=tuple(np.array(o, dtype=int) for o in data["oob_indices"]),
    )
