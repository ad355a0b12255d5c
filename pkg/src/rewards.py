"""
Counterfactual rewards: the N x 2 matrix of predicted horizon mortality under
each arm (column 0 = SAVR, column 1 = TAVR), from one survival forest per arm.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import colorlog
import numpy as np
import pandas as pd

from src.cohort import Cohort, TreatmentArm
from src.config import DEFAULT_HORIZON_DAYS
from src.errors import DuplicateId, InconsistentDimensions, SchemaMismatch
from src.survival_forest import SurvivalForest, forest_fingerprint, predict_risks

logger = colorlog.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RewardsMatrix:
    """Predicted risk per patient per arm; lower is better."""

    gamma: np.ndarray
    horizon_days: float = DEFAULT_HORIZON_DAYS
    model_ids: Tuple[str, str] = ("", "")
    ids: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float, copy=True)
        if gamma.ndim != 2 or gamma.shape[1] != 2:
            raise InconsistentDimensions(f"rewards must be N x 2, got {gamma.shape}", stage="rewards")
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        if self.ids is not None and len(self.ids) != gamma.shape[0]:
            raise InconsistentDimensions("ids length differs from rewards rows", stage="rewards")

    @property
    def n(self) -> int:
        return self.gamma.shape[0]

    def subset(self, rows: np.ndarray) -> "RewardsMatrix":
        rows = np.asarray(rows)
        ids = None if self.ids is None else tuple(np.asarray(self.ids, dtype=object)[rows])
        return RewardsMatrix(self.gamma[rows], self.horizon_days, self.model_ids, ids)

    def to_frame(self) -> pd.DataFrame:
        ids = self.ids if self.ids is not None else tuple(str(i) for i in range(self.n))
        return pd.DataFrame({
            "id": list(ids),
            "risk_savr": self.gamma[:, TreatmentArm.SAVR],
            "risk_tavr": self.gamma[:, TreatmentArm.TAVR],
        })


def estimate_rewards(
    cohort: Cohort,
    forest_savr: SurvivalForest,
    forest_tavr: SurvivalForest,
    horizon_days: float = DEFAULT_HORIZON_DAYS,
    n_jobs: Optional[int] = None,
) -> RewardsMatrix:
    """
    Predict every patient's risk under both arms, regardless of the arm received.
    """
    names = tuple(cohort.schema.names)
    for arm, forest in (("SAVR", forest_savr), ("TAVR", forest_tavr)):
        if forest.feature_names != names:
            raise SchemaMismatch(f"{arm} forest was trained on a different feature set", stage="rewards")

    gamma = np.column_stack([
        predict_risks(forest_savr, cohort.features, horizon_days, n_jobs),
        predict_risks(forest_tavr, cohort.features, horizon_days, n_jobs),
    ])
    rewards = RewardsMatrix(
        gamma=gamma,
        horizon_days=horizon_days,
        model_ids=(forest_fingerprint(forest_savr), forest_fingerprint(forest_tavr)),
        ids=cohort.ids,
    )
    logger.info(
        f"Estimated counterfactual risks for {cohort.n} patients "
        f"(mean SAVR={gamma[:, 0].mean():.4f}, mean TAVR={gamma[:, 1].mean():.4f})"
    )
    return rewards


def best_uniform_arm(rewards: RewardsMatrix) -> TreatmentArm:
    """Arm with the smaller column sum; ties go to SAVR."""
    totals = rewards.gamma.sum(axis=0)
    return TreatmentArm.TAVR if totals[TreatmentArm.TAVR] < totals[TreatmentArm.SAVR] else TreatmentArm.SAVR


def rowwise_best_arms(rewards: RewardsMatrix) -> np.ndarray:
    """Per-patient arm with the lower predicted risk (ties to SAVR)."""
    return (rewards.gamma[:, TreatmentArm.TAVR] < rewards.gamma[:, TreatmentArm.SAVR]).astype(np.int8)


def write_rewards_csv(rewards: RewardsMatrix, path: Union[str, Path]) -> None:
    """Write rewards as (id, risk_savr, risk_tavr)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rewards.to_frame().to_csv(path, index=False, float_format="%.17g")


def load_rewards_csv(path: Union[str, Path], horizon_days: float = DEFAULT_HORIZON_DAYS) -> RewardsMatrix:
    """Read a rewards CSV written by write_rewards_csv."""
    frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    for column in ("id", "risk_savr", "risk_tavr"):
        if column not in frame.columns:
            raise SchemaMismatch(f"rewards file {path} lacks column '{column}'", stage="rewards")
    duplicated = frame["id"].duplicated()
    if duplicated.any():
        raise DuplicateId(
            f"rewards file {path} repeats patient id {frame['id'][duplicated].iloc[0]!r}", stage="rewards"
        )
    return RewardsMatrix(
        gamma=frame[["risk_savr", "risk_tavr"]].to_numpy(dtype=float),
        horizon_days=horizon_days,
        ids=tuple(frame["id"]),
    )


def align_rewards(rewards: RewardsMatrix, cohort: Cohort) -> RewardsMatrix:
    """Reorder rewards rows to follow the cohort's ids."""
    if rewards.ids is None:
        if rewards.n != cohort.n:
            raise InconsistentDimensions("rewards rows differ from cohort size", stage="rewards")
        return rewards
    position = {pid: i for i, pid in enumerate(rewards.ids)}
    missing = [pid for pid in cohort.ids if pid not in position]
    if missing:
        raise InconsistentDimensions(
            f"{len(missing)} cohort patients have no rewards row", stage="rewards", patient=missing[0]
        )
    return rewards.subset(np.array([position[pid] for pid in cohort.ids]))
