"""
Prognostic matching: stratify patients by STS risk into near-equal-count
buckets, then greedily pair SAVR and TAVR patients 1:1 within each bucket on
standardized covariates plus proximity in predicted risk.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import colorlog
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist

from src.cohort import Cohort, TreatmentArm
from src.config import DEFAULT_BUCKETS, DEFAULT_PROGNOSTIC_WEIGHT, N_JOBS
from src.errors import InconsistentDimensions, InvalidConfig, MissingFeature, TooFewPatients

logger = colorlog.getLogger(__name__)


@dataclass(frozen=True)
class RiskStrata:
    """Ascending cut points on the STS risk feature; value <= cut goes to the lower bucket."""

    boundaries: tuple
    k: int
    warnings: tuple = ()

    def assign(self, values: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries, dtype=float), values, side="left")


@dataclass(frozen=True)
class MatchedPair:
    savr_id: str
    tavr_id: str
    distance: float
    bucket: int


@dataclass(frozen=True, eq=False)
class MatchedCohort:
    """Matched pairs and the input cohort restricted to matched patients."""

    pairs: List[MatchedPair]
    cohort: Cohort
    strata: RiskStrata
    warnings: List[str] = field(default_factory=list)

    def pairs_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(p.savr_id, p.tavr_id, p.bucket, p.distance) for p in self.pairs],
            columns=["savr_id", "tavr_id", "bucket", "distance"],
        )


def make_strata(sts_values: Sequence[float], k: int = DEFAULT_BUCKETS) -> RiskStrata:
    """
    Cut points at the i/k empirical quantiles (linear interpolation).

    Cut points that would leave a bucket empty because of ties are dropped
    and a warning recorded; all-equal values collapse to one bucket.
    """
    values = np.asarray(sts_values, dtype=float)
    if k < 1:
        raise InvalidConfig(f"bucket count must be at least 1, got {k}", stage="match")
    if values.size < k:
        raise TooFewPatients(f"{values.size} patients cannot fill {k} buckets", stage="match")
    if np.isnan(values).any():
        raise MissingFeature("STS values must be complete before stratifying", stage="match")

    if k == 1:
        return RiskStrata(boundaries=(), k=1)

    quantiles = np.quantile(values, np.arange(1, k) / k)
    boundaries = np.unique(quantiles)
    boundaries = boundaries[boundaries < values.max()]

    warnings = ()
    if boundaries.size != k - 1:
        message = f"Tied STS values collapsed {k} requested buckets into {boundaries.size + 1}"
        logger.warning(message)
        warnings = (message,)
    return RiskStrata(boundaries=tuple(float(b) for b in boundaries), k=boundaries.size + 1, warnings=warnings)


def _standardized(cohort: Cohort, columns: List[int]) -> np.ndarray:
    block = cohort.features[:, columns]
    if np.isnan(block).any():
        raise MissingFeature("matching features must be imputed first", stage="match")
    means = block.mean(axis=0)
    stds = block.std(axis=0, ddof=1) if cohort.n > 1 else np.zeros(len(columns))
    scale = np.where(stds > 0, stds, 1.0)
    z = (block - means) / scale
    z[:, stds <= 0] = 0.0
    return z


def _match_bucket(
    bucket: int,
    savr_rows: np.ndarray,
    tavr_rows: np.ndarray,
    z: np.ndarray,
    risk: Optional[np.ndarray],
    prognostic_weight: float,
    ids: tuple,
) -> List[MatchedPair]:
    if savr_rows.size == 0 or tavr_rows.size == 0:
        return []

    squared = cdist(z[savr_rows], z[tavr_rows], metric="sqeuclidean")
    if risk is not None and prognostic_weight > 0:
        squared = squared + prognostic_weight * cdist(risk[savr_rows], risk[tavr_rows], metric="sqeuclidean")

    savr_ids = np.array([ids[i] for i in savr_rows])
    tavr_ids = np.array([ids[i] for i in tavr_rows])
    s_index, t_index = np.meshgrid(np.arange(savr_rows.size), np.arange(tavr_rows.size), indexing="ij")
    s_index, t_index = s_index.ravel(), t_index.ravel()
    # lexsort keys: last is primary
    order = np.lexsort((tavr_ids[t_index], savr_ids[s_index], squared.ravel()))

    used_savr = np.zeros(savr_rows.size, dtype=bool)
    used_tavr = np.zeros(tavr_rows.size, dtype=bool)
    pairs = []
    target = min(savr_rows.size, tavr_rows.size)
    for flat in order:
        s, t = s_index[flat], t_index[flat]
        if used_savr[s] or used_tavr[t]:
            continue
        used_savr[s] = used_tavr[t] = True
        pairs.append(MatchedPair(
            savr_id=str(savr_ids[s]),
            tavr_id=str(tavr_ids[t]),
            distance=float(np.sqrt(squared[s, t])),
            bucket=bucket,
        ))
        if len(pairs) == target:
            break
    return pairs


def match_within_strata(
    cohort: Cohort,
    strata: RiskStrata,
    sts_feature: str,
    distance_features: Optional[List[str]] = None,
    prognostic_weight: float = DEFAULT_PROGNOSTIC_WEIGHT,
    risk_scores: Optional[np.ndarray] = None,
    n_jobs: Optional[int] = None,
) -> MatchedCohort:
    """
    1:1 greedy nearest-neighbor matching without replacement inside each bucket.

    The globally closest unmatched SAVR/TAVR pair in a bucket is taken first.
    distance^2 = sum of standardized covariate gaps^2 + prognostic_weight *
    sum of risk-score gaps^2. Ties are broken by (savr_id, tavr_id).

    Args:
        cohort: Imputed cohort
        strata: Buckets on the STS feature
        sts_feature: Name of the STS risk feature
        distance_features: Covariates in the distance (default: every feature except STS)
        prognostic_weight: Weight of the predicted-risk term
        risk_scores: N x 2 predicted risks (required when prognostic_weight > 0)
        n_jobs: Parallel workers over buckets

    Returns:
        MatchedCohort with pairs ordered by bucket then pairing order
    """
    schema = cohort.schema
    if distance_features is None:
        distance_features = [name for name in schema.names if name != sts_feature]
    columns = [schema.index(name) for name in distance_features]

    risk = None
    if prognostic_weight > 0:
        if risk_scores is None:
            raise InvalidConfig("prognostic_weight > 0 requires risk_scores", stage="match")
        risk = np.asarray(risk_scores, dtype=float)
        if risk.shape != (cohort.n, 2):
            raise InconsistentDimensions(
                f"risk_scores shape {risk.shape} does not match {cohort.n} patients", stage="match"
            )

    z = _standardized(cohort, columns)
    buckets = strata.assign(cohort.column(sts_feature))

    jobs = []
    warnings = list(strata.warnings)
    for bucket in range(strata.k):
        in_bucket = buckets == bucket
        savr_rows = np.flatnonzero(in_bucket & (cohort.arms == TreatmentArm.SAVR))
        tavr_rows = np.flatnonzero(in_bucket & (cohort.arms == TreatmentArm.TAVR))
        if savr_rows.size == 0 or tavr_rows.size == 0:
            message = (
                f"Bucket {bucket} has an empty arm (SAVR={savr_rows.size}, TAVR={tavr_rows.size}); "
                "it contributes no pairs"
            )
            logger.warning(message)
            warnings.append(message)
        jobs.append((bucket, savr_rows, tavr_rows))

    results = Parallel(n_jobs=n_jobs or N_JOBS)(
        delayed(_match_bucket)(bucket, s, t, z, risk, prognostic_weight, cohort.ids)
        for bucket, s, t in jobs
    )
    pairs = [pair for bucket_pairs in results for pair in bucket_pairs]

    matched_ids = {p.savr_id for p in pairs} | {p.tavr_id for p in pairs}
    keep = np.array([pid in matched_ids for pid in cohort.ids], dtype=bool)
    matched = cohort.subset(keep)

    logger.info(
        f"Matched {len(pairs)} pairs across {strata.k} buckets "
        f"({matched.n} of {cohort.n} patients kept)"
    )
    return MatchedCohort(pairs=pairs, cohort=matched, strata=strata, warnings=warnings)


def write_pairs_csv(matched: MatchedCohort, path: Union[str, Path]) -> None:
    """Write matched pairs as (savr_id, tavr_id, bucket, distance)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    matched.pairs_frame().to_csv(path, index=False, float_format="%.12g")
