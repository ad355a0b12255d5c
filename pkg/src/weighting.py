"""
Sample weighting for policy-tree training.

t* is the arm with the smaller total predicted risk. Patients who received t*
but had a bad outcome, and patients who received the other arm but had a good
outcome, get weight w; everyone else (indeterminate included) gets 1. The
sweep refits the tree for each w on a grid and keeps the w with the highest
mean of sensitivity and specificity on the training cohort.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import colorlog
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from src.cohort import BinaryLabel, Cohort, TreatmentArm, label_codes, split_by_arm
from src.config import DEFAULT_HORIZON_DAYS, DEFAULT_WEIGHT_GRID, DEFAULT_WEIGHT_MODE, N_JOBS, WEIGHT_MODES
from src.errors import InconsistentDimensions, InvalidConfig
from src.evaluation import sensitivity, specificity
from src.policy_tree import TreeParams, fit_policy_tree, prescribe_many, tree_fingerprint
from src.rewards import RewardsMatrix, best_uniform_arm, estimate_rewards
from src.survival_forest import ForestParams, fit_forest

logger = colorlog.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-patient training weights; every entry is 1 or w."""

    weights: np.ndarray
    w: float
    t_star: TreatmentArm

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float, copy=True)
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def n_upweighted(self) -> int:
        return int((self.weights != 1.0).sum()) if self.w != 1.0 else 0


def assign_weights(
    labels: Sequence[BinaryLabel],
    arms: Sequence[int],
    t_star: TreatmentArm,
    w: float,
) -> WeightVector:
    """
    Weight w for (received t*, bad) and (received the other arm, good), else 1.

    Args:
        labels: Horizon labels
        arms: Received arm per patient
        t_star: The arm with the smaller total predicted risk
        w: Multiplier, at least 1

    Returns:
        WeightVector
    """
    codes = label_codes(labels)
    received = np.asarray(arms, dtype=int)
    if codes.size != received.size:
        raise InconsistentDimensions(
            f"{codes.size} labels but {received.size} arms", stage="sweep"
        )
    if not w >= 1.0:
        raise InvalidConfig(f"weight must be at least 1, got {w}", stage="sweep")

    on_t_star = received == int(t_star)
    upweighted = (on_t_star & (codes == 1)) | (~on_t_star & (codes == 0))
    weights = np.where(upweighted, float(w), 1.0)
    return WeightVector(weights=weights, w=float(w), t_star=TreatmentArm(t_star))


def weighted_rewards(rewards: RewardsMatrix, weights: WeightVector) -> np.ndarray:
    """w_i * gamma[i, :] as an N x 2 array."""
    if weights.weights.size != rewards.n:
        raise InconsistentDimensions("weights length differs from rewards rows", stage="sweep")
    return weights.weights[:, None] * rewards.gamma


def refit_rewards(
    cohort: Cohort,
    weights: WeightVector,
    forest_params: ForestParams,
    horizon_days: float = DEFAULT_HORIZON_DAYS,
    n_jobs: Optional[int] = None,
) -> RewardsMatrix:
    """Re-estimate counterfactuals with forests whose bootstrap draws follow the weights."""
    savr_rows = cohort.arms == TreatmentArm.SAVR
    savr, tavr = split_by_arm(cohort)
    forest_savr = fit_forest(savr, forest_params, weights.weights[savr_rows], n_jobs)
    forest_tavr = fit_forest(tavr, forest_params, weights.weights[~savr_rows], n_jobs)
    return estimate_rewards(cohort, forest_savr, forest_tavr, horizon_days, n_jobs)


# ============================================================================
# Sweep
# ============================================================================

class SweepRow(BaseModel):
    """Training-cohort metrics of the tree fitted at one weight."""

    w: float = Field(..., ge=1, description="Applied weight")
    sensitivity: float = Field(..., ge=0, le=1, description="Bad-outcome patients re-prescribed")
    specificity: float = Field(..., ge=0, le=1, description="Good-outcome patients kept on their arm")
    mean_score: float = Field(..., ge=0, le=1, description="Mean of sensitivity and specificity")
    frac_non_t_star: float = Field(..., ge=0, le=1, description="Share prescribed the arm other than t*")
    tree_fingerprint: str = Field(..., description="sha256 of the tree's JSON export")


class SweepResult(BaseModel):
    """Full sweep table and the selected weight."""

    rows: List[SweepRow] = Field(..., description="One row per grid weight, ascending")
    selected_w: float = Field(..., description="Weight with the highest mean score (ties to smaller)")
    t_star: str = Field(..., description="Arm with the smaller total predicted risk")
    mode: str = Field(DEFAULT_WEIGHT_MODE, description="tree or refit")

    def selected_row(self) -> SweepRow:
        return next(row for row in self.rows if row.w == self.selected_w)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows])


def select_weight(rows: Sequence[SweepRow]) -> float:
    """Highest mean score; ties go to the smaller w."""
    best = None
    for row in sorted(rows, key=lambda r: r.w):
        if best is None or row.mean_score > best.mean_score:
            best = row
    return best.w


def _sweep_point(
    w: float,
    cohort: Cohort,
    rewards: RewardsMatrix,
    labels: Sequence[BinaryLabel],
    t_star: TreatmentArm,
    tree_params: TreeParams,
    mode: str,
    forest_params: Optional[ForestParams],
    horizon_days: float,
) -> SweepRow:
    weights = assign_weights(labels, cohort.arms, t_star, w)
    point_rewards = rewards
    if mode == "refit" and w != 1.0:
        point_rewards = refit_rewards(cohort, weights, forest_params, horizon_days, n_jobs=1)
    tree = fit_policy_tree(
        cohort.features, point_rewards, weights, tree_params, cohort.schema.names, n_jobs=1
    )
    prescribed = prescribe_many(tree, cohort.features)
    sens = sensitivity(prescribed, cohort.arms, labels)
    spec = specificity(prescribed, cohort.arms, labels)
    return SweepRow(
        w=w,
        sensitivity=sens,
        specificity=spec,
        mean_score=0.5 * (sens + spec),
        frac_non_t_star=float((prescribed != int(t_star)).mean()),
        tree_fingerprint=tree_fingerprint(tree),
    )


def weight_sweep(
    cohort: Cohort,
    rewards: RewardsMatrix,
    labels: Sequence[BinaryLabel],
    w_grid: Sequence[float] = DEFAULT_WEIGHT_GRID,
    tree_params: Optional[TreeParams] = None,
    mode: str = DEFAULT_WEIGHT_MODE,
    forest_params: Optional[ForestParams] = None,
    horizon_days: float = DEFAULT_HORIZON_DAYS,
    n_jobs: Optional[int] = None,
) -> SweepResult:
    """
    Refit the policy tree at every grid weight and select by mean(sensitivity, specificity).

    Every grid point uses the same tree seed, so w=1 reproduces the unweighted
    tree. In "refit" mode the per-arm forests are also refitted with weighted
    bootstrap sampling before the tree is trained.

    Args:
        cohort: Matched, imputed training cohort
        rewards: Counterfactual risks aligned with the cohort
        labels: Horizon labels of the cohort
        w_grid: Ascending weights, each at least 1
        tree_params: Policy tree settings
        mode: "tree" (reweight the tree objective only) or "refit"
        forest_params: Forest settings for "refit" mode
        horizon_days: Horizon for refitted risks
        n_jobs: Parallel workers over grid points

    Returns:
        SweepResult
    """
    grid = [float(w) for w in w_grid]
    if not grid:
        raise InvalidConfig("weight grid is empty", stage="sweep")
    if any(w < 1.0 for w in grid):
        raise InvalidConfig("weight grid values must be at least 1", stage="sweep")
    if grid != sorted(grid):
        raise InvalidConfig("weight grid must be ascending", stage="sweep")
    if mode not in WEIGHT_MODES:
        raise InvalidConfig(f"unknown weight mode '{mode}'", stage="sweep")
    if mode == "refit" and forest_params is None:
        raise InvalidConfig("refit mode needs forest parameters", stage="sweep")
    if rewards.n != cohort.n:
        raise InconsistentDimensions("rewards rows differ from cohort size", stage="sweep")

    tree_params = tree_params or TreeParams()
    t_star = best_uniform_arm(rewards)
    logger.info(f"Sweeping {len(grid)} weights (t*={t_star.name}, mode={mode})")

    rows = Parallel(n_jobs=n_jobs or N_JOBS)(
        delayed(_sweep_point)(
            w, cohort, rewards, labels, t_star, tree_params, mode, forest_params, horizon_days
        )
        for w in grid
    )
    for row in rows:
        logger.debug(
            f"w={row.w:.2f}: sensitivity={row.sensitivity:.3f} specificity={row.specificity:.3f}"
        )
    selected = select_weight(rows)
    logger.info(f"Selected weight w={selected:.2f}")
    return SweepResult(rows=list(rows), selected_w=selected, t_star=t_star.name, mode=mode)


def write_sweep_csv(result: SweepResult, path: Union[str, Path]) -> None:
    """Write the sweep table (w, sensitivity, specificity, ...)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    result.to_frame().to_csv(path, index=False, float_format="%.12g")
