"""
K-nearest-neighbor imputation fitted on a training cohort and reusable on
external cohorts.

Distances are Euclidean over standardized features observed in the target
row, rescaled by sqrt(p / p_observed). Neighbors come from the training
complete cases; ties in distance go to the lower reference row index.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import colorlog
import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.cohort import Cohort, FeatureSchema
from src.config import DEFAULT_KNN_K, N_JOBS
from src.errors import InsufficientCompleteRows, InvalidConfig, SchemaMismatch

logger = colorlog.getLogger(__name__)

IMPUTER_FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ImputationModel:
    """Standardization statistics plus the complete-case reference rows."""

    k: int
    schema: FeatureSchema
    column_means: np.ndarray
    column_stds: np.ndarray
    reference_values: np.ndarray

    @property
    def distance_mask(self) -> np.ndarray:
        """Columns usable in distances (finite, positive spread)."""
        stds = self.column_stds
        return np.isfinite(stds) & (stds > 0)

    @property
    def reference_rows(self) -> np.ndarray:
        """Reference matrix standardized with the training statistics."""
        return _standardize(self.reference_values, self.column_means, self.column_stds)


def _standardize(values: np.ndarray, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    usable = np.isfinite(stds) & (stds > 0)
    scale = np.where(usable, stds, 1.0)
    z = (values - means) / scale
    z[:, ~usable] = 0.0
    return z


def fit_imputer(train: Cohort, k: int = DEFAULT_KNN_K) -> ImputationModel:
    """
    Fit a KNN imputer on a training cohort.

    Args:
        train: Cohort providing statistics and complete-case reference rows
        k: Number of neighbors

    Returns:
        ImputationModel with statistics computed on observed cells only
    """
    if k < 1:
        raise InvalidConfig(f"k must be at least 1, got {k}", stage="impute")

    frame = train.feature_frame()
    means = frame.mean(axis=0, skipna=True).to_numpy(dtype=float)
    stds = frame.std(axis=0, skipna=True, ddof=1).to_numpy(dtype=float)

    complete = ~train.missing_mask.any(axis=1)
    n_complete = int(complete.sum())
    if n_complete < k:
        raise InsufficientCompleteRows(
            f"{n_complete} complete rows available, need at least k={k}",
            stage="impute",
        )

    model = ImputationModel(
        k=k,
        schema=train.schema,
        column_means=means,
        column_stds=stds,
        reference_values=train.features[complete].copy(),
    )
    excluded = [name for name, ok in zip(train.schema.names, model.distance_mask) if not ok]
    if excluded:
        logger.warning(f"Zero-variance columns excluded from KNN distances: {', '.join(excluded)}")
    logger.info(f"Fitted KNN imputer (k={k}) on {n_complete} complete rows of {train.n}")
    return model


def _fill_row(model: ImputationModel, reference_z: np.ndarray, row: np.ndarray) -> np.ndarray:
    missing = np.isnan(row)
    distance_cols = model.distance_mask
    observed = ~missing & distance_cols
    p = int(distance_cols.sum())
    p_observed = int(observed.sum())

    if p_observed:
        z_row = (row[observed] - model.column_means[observed]) / model.column_stds[observed]
        squared = ((reference_z[:, observed] - z_row) ** 2).sum(axis=1)
        distances = np.sqrt(squared * (p / p_observed))
    else:
        distances = np.zeros(reference_z.shape[0])

    neighbors = np.argsort(distances, kind="stable")[: model.k]
    neighbor_values = model.reference_values[neighbors]

    filled = row.copy()
    binary = model.schema.binary_mask
    for j in np.flatnonzero(missing):
        mean_value = neighbor_values[:, j].mean()
        if binary[j]:
            # majority vote, ties resolved toward presence
            filled[j] = 1.0 if mean_value >= 0.5 else 0.0
        else:
            filled[j] = mean_value
    return filled


def impute(model: ImputationModel, target: Cohort, n_jobs: Optional[int] = None) -> Cohort:
    """
    Fill every missing cell of a cohort from its k nearest reference rows.

    Continuous cells take the neighbor mean, binary cells the neighbor
    majority. Observed cells are never changed.
    """
    if target.schema != model.schema:
        raise SchemaMismatch("target schema differs from the imputer's training schema", stage="impute")

    missing_rows = np.flatnonzero(target.missing_mask.any(axis=1))
    if missing_rows.size == 0:
        return target

    reference_z = model.reference_rows
    filled_rows = Parallel(n_jobs=n_jobs or N_JOBS)(
        delayed(_fill_row)(model, reference_z, target.features[i]) for i in missing_rows
    )
    features = np.array(target.features, copy=True)
    for i, filled in zip(missing_rows, filled_rows):
        features[i] = filled

    logger.info(
        f"Imputed {int(target.missing_mask.sum())} cells across {missing_rows.size} patients"
    )
    return target.with_features(features)


def missingness_summary(cohort: Cohort) -> pd.Series:
    """Fraction of missing cells per feature."""
    return pd.Series(cohort.missing_mask.mean(axis=0), index=cohort.schema.names, name="missing_fraction")


# ============================================================================
# Persistence
# ============================================================================

def _nullable(values: np.ndarray) -> list:
    return [None if not np.isfinite(v) else float(v) for v in values]


def save_imputer(model: ImputationModel, path: Union[str, Path]) -> None:
    """Write the imputer statistics and reference matrix as JSON."""
    document = {
        "format_version": IMPUTER_FORMAT_VERSION,
        "k": model.k,
        "schema": model.schema.to_json_dict(),
        "column_means": _nullable(model.column_means),
        "column_stds": _nullable(model.column_stds),
        "reference_values": model.reference_values.tolist(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)


def load_imputer(path: Union[str, Path]) -> ImputationModel:
    """Read an imputer written by save_imputer."""
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if document.get("format_version") != IMPUTER_FORMAT_VERSION:
        raise InvalidConfig(f"unsupported imputer format in {path}", path=str(path))

    def _array(values):
        return np.array([np.nan if v is None else v for v in values], dtype=float)

    schema = FeatureSchema.model_validate(document["schema"])
    reference = np.array(document["reference_values"], dtype=float).reshape(-1, schema.p)
    return ImputationModel(
        k=int(document["k"]),
        schema=schema,
        column_means=_array(document["column_means"]),
        column_stds=_array(document["column_stds"]),
        reference_values=reference,
    )
