"""
Cohort data model: feature schema, treatment arms, censored survival outcomes,
horizon labels and CSV ingestion/emission.

CSV conventions: UTF-8, comma separated, header row, empty cell = missing,
binary features and the event flag as 0/1, treatment as the literal SAVR/TAVR
(parsed case-insensitively).
"""

import json
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import colorlog
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config import DEFAULT_HORIZON_DAYS
from src.errors import (
    DuplicateId,
    InvalidConfig,
    MissingColumn,
    SchemaMismatch,
    UnknownTreatment,
    UnparsableCell,
)

logger = colorlog.getLogger(__name__)

FLOAT_FORMAT = "%.12g"


# ============================================================================
# Schema
# ============================================================================

class FeatureKind(str, Enum):
    """Kind of a covariate column."""

    CONTINUOUS = "continuous"
    BINARY = "binary"


class FeatureSpec(BaseModel):
    """A single covariate column."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1, description="Column name in the cohort CSV")
    kind: FeatureKind = Field(..., description="continuous or binary")


class FeatureSchema(BaseModel):
    """Column layout of a cohort file."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    columns: Tuple[FeatureSpec, ...] = Field(..., alias="features", description="Ordered covariates")
    treatment_column: str = Field(..., alias="treatment", description="Treatment arm column")
    time_column: str = Field(..., alias="time", description="Follow-up time in days")
    event_column: str = Field(..., alias="event", description="1 if death observed at time")
    id_column: str = Field("id", alias="id", description="Opaque patient identifier column")

    @model_validator(mode="after")
    def _check_names(self) -> "FeatureSchema":
        names = [spec.name for spec in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("feature column names must be unique")
        reserved = [self.treatment_column, self.time_column, self.event_column, self.id_column]
        if len(set(reserved)) != len(reserved):
            raise ValueError("treatment, time, event and id columns must be distinct")
        overlap = set(names) & set(reserved)
        if overlap:
            raise ValueError(f"outcome/treatment columns used as features: {sorted(overlap)}")
        return self

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.columns]

    @property
    def kinds(self) -> List[FeatureKind]:
        return [spec.kind for spec in self.columns]

    @property
    def p(self) -> int:
        return len(self.columns)

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([kind == FeatureKind.BINARY for kind in self.kinds], dtype=bool)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaMismatch(f"feature '{name}' is not in the schema", feature=name) from None

    def kind_of(self, name: str) -> FeatureKind:
        return self.columns[self.index(name)].kind

    def to_json_dict(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def load_schema(path: Union[str, Path]) -> FeatureSchema:
    """
    Load a FeatureSchema from its JSON document.

    Args:
        path: Path to {"features": [...], "treatment": ..., "time": ..., "event": ...}

    Returns:
        Validated FeatureSchema
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except OSError as e:
        raise InvalidConfig(f"cannot read schema {path}: {e.strerror}", path=str(path)) from e
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"schema {path} is not valid JSON: {e.msg} at line {e.lineno}", path=str(path)) from e
    try:
        return FeatureSchema.model_validate(document)
    except ValidationError as e:
        raise InvalidConfig(f"invalid schema {path}: {e.errors()[0]['msg']}", path=str(path)) from e


def save_schema(schema: FeatureSchema, path: Union[str, Path]) -> None:
    """Write a FeatureSchema as JSON."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(schema.to_json_dict(), f, indent=2, sort_keys=True)


# ============================================================================
# Arms, outcomes, labels
# ============================================================================

class TreatmentArm(IntEnum):
    """The two treatment arms with their fixed integer encoding."""

    SAVR = 0
    TAVR = 1

    @classmethod
    def parse(cls, raw: str) -> "TreatmentArm":
        return cls[raw.strip().upper()]

    @property
    def other(self) -> "TreatmentArm":
        return TreatmentArm(1 - int(self))


@dataclass(frozen=True)
class SurvivalOutcome:
    """Follow-up time and whether death was observed at that time."""

    time_days: float
    event: bool

    def __post_init__(self):
        if not self.time_days >= 0:
            raise ValueError(f"time_days must be non-negative, got {self.time_days}")


class BinaryLabel(str, Enum):
    """Horizon outcome of a patient."""

    GOOD = "good"
    BAD = "bad"
    INDETERMINATE = "indeterminate"


LABEL_CODES = {BinaryLabel.GOOD: 0, BinaryLabel.BAD: 1, BinaryLabel.INDETERMINATE: -1}


def label_codes(labels: Sequence[BinaryLabel]) -> np.ndarray:
    """Encode labels as integers: bad=1, good=0, indeterminate=-1."""
    return np.array([LABEL_CODES[BinaryLabel(label)] for label in labels], dtype=np.int8)


# ============================================================================
# Cohort
# ============================================================================

def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_unique_ids(ids: Sequence[str]) -> None:
    seen = {}
    for row, pid in enumerate(ids):
        if pid in seen:
            raise DuplicateId(f"patient id {pid!r} appears more than once", row=row + 1, first_row=seen[pid] + 1)
        seen[pid] = row


@dataclass(frozen=True, eq=False)
class Cohort:
    """
    N patients: covariates (NaN = missing), received arm, survival outcome, id.

    Arrays are read-only copies; derive new cohorts with subset() or
    with_features() instead of mutating.
    """

    schema: FeatureSchema
    features: np.ndarray
    arms: np.ndarray
    times: np.ndarray
    events: np.ndarray
    ids: Tuple[str, ...]

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, self.schema.p)
        if features.ndim != 2 or features.shape[1] != self.schema.p:
            raise SchemaMismatch(
                f"feature matrix has shape {features.shape}, schema has {self.schema.p} features"
            )
        n = features.shape[0]
        for name, values in (("arms", self.arms), ("times", self.times), ("events", self.events), ("ids", self.ids)):
            if len(values) != n:
                raise SchemaMismatch(f"{name} has {len(values)} rows, features have {n}")

        arms = np.asarray(self.arms, dtype=np.int8)
        if n and not np.isin(arms, (0, 1)).all():
            raise UnknownTreatment("arm codes must be 0 (SAVR) or 1 (TAVR)")
        times = np.asarray(self.times, dtype=float)
        if n and not (times >= 0).all():
            bad_row = int(np.flatnonzero(~(times >= 0))[0])
            raise UnparsableCell("time must be non-negative", row=bad_row, column=self.schema.time_column)

        binary = features[:, self.schema.binary_mask]
        observed = binary[~np.isnan(binary)]
        if observed.size and not np.isin(observed, (0.0, 1.0)).all():
            raise SchemaMismatch("binary feature cells must be 0, 1 or missing")

        object.__setattr__(self, "features", _frozen(features, float))
        object.__setattr__(self, "arms", _frozen(arms, np.int8))
        object.__setattr__(self, "times", _frozen(times, float))
        object.__setattr__(self, "events", _frozen(np.asarray(self.events, dtype=bool), bool))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        _check_unique_ids(self.ids)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def outcomes(self) -> List[SurvivalOutcome]:
        return [SurvivalOutcome(float(t), bool(e)) for t, e in zip(self.times, self.events)]

    @property
    def arm_list(self) -> List[TreatmentArm]:
        return [TreatmentArm(int(a)) for a in self.arms]

    @property
    def missing_mask(self) -> np.ndarray:
        return np.isnan(self.features)

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.schema.index(name)]

    def subset(self, rows: Union[np.ndarray, Sequence[int]]) -> "Cohort":
        """Restrict to the given row indices or boolean mask, preserving order."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        rows = rows.astype(int)
        return Cohort(
            schema=self.schema,
            features=self.features[rows],
            arms=self.arms[rows],
            times=self.times[rows],
            events=self.events[rows],
            ids=tuple(self.ids[i] for i in rows),
        )

    def with_features(self, features: np.ndarray) -> "Cohort":
        return Cohort(self.schema, features, self.arms, self.times, self.events, self.ids)

    def feature_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.features, columns=self.schema.names, index=list(self.ids))

    def to_frame(self) -> pd.DataFrame:
        """Tabular form in file column order: id, features, treatment, time, event."""
        schema = self.schema
        frame = pd.DataFrame({schema.id_column: list(self.ids)})
        for j, name in enumerate(schema.names):
            frame[name] = self.features[:, j]
        frame[schema.treatment_column] = [TreatmentArm(int(a)).name for a in self.arms]
        frame[schema.time_column] = self.times
        frame[schema.event_column] = self.events.astype(int)
        return frame


# ============================================================================
# Ingestion / emission
# ============================================================================

def _parse_numeric(raw: pd.Series, column: str, allow_missing: bool) -> np.ndarray:
    stripped = raw.str.strip()
    values = pd.to_numeric(stripped.replace("", np.nan), errors="coerce").to_numpy(dtype=float)
    empty = (stripped == "").to_numpy()
    bad = np.isnan(values) & ~empty
    if not allow_missing:
        bad |= empty
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise UnparsableCell(
            f"cannot parse {raw.iloc[row]!r} as a number",
            row=row + 1,
            column=column,
        )
    return values


def load_cohort(path: Union[str, Path], schema: FeatureSchema) -> Cohort:
    """
    Load a cohort CSV.

    Args:
        path: CSV file whose header contains the schema's columns
        schema: Column layout

    Returns:
        Cohort with one row per data row; empty cells become NaN
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except OSError as e:
        raise InvalidConfig(f"cannot read cohort {path}: {e.strerror}", path=str(path)) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise UnparsableCell(f"malformed CSV {path}: {str(e).strip()}", path=str(path)) from e
    frame.columns = [c.strip() for c in frame.columns]

    required = schema.names + [schema.treatment_column, schema.time_column, schema.event_column]
    for name in required:
        if name not in frame.columns:
            raise MissingColumn(f"column '{name}' not found in {path}", column=name)

    features = np.empty((len(frame), schema.p), dtype=float)
    for j, spec in enumerate(schema.columns):
        values = _parse_numeric(frame[spec.name], spec.name, allow_missing=True)
        if spec.kind == FeatureKind.BINARY:
            observed = ~np.isnan(values)
            invalid = observed & ~np.isin(values, (0.0, 1.0))
            if invalid.any():
                row = int(np.flatnonzero(invalid)[0])
                raise UnparsableCell("binary cell must be 0 or 1", row=row + 1, column=spec.name)
        features[:, j] = values

    arms = np.empty(len(frame), dtype=np.int8)
    for i, raw in enumerate(frame[schema.treatment_column]):
        try:
            arms[i] = TreatmentArm.parse(raw)
        except KeyError:
            raise UnknownTreatment(f"unknown treatment {raw!r}", row=i + 1, column=schema.treatment_column) from None

    times = _parse_numeric(frame[schema.time_column], schema.time_column, allow_missing=False)
    negative = times < 0
    if negative.any():
        row = int(np.flatnonzero(negative)[0])
        raise UnparsableCell("time must be non-negative", row=row + 1, column=schema.time_column)

    events = _parse_numeric(frame[schema.event_column], schema.event_column, allow_missing=False)
    if not np.isin(events, (0.0, 1.0)).all():
        row = int(np.flatnonzero(~np.isin(events, (0.0, 1.0)))[0])
        raise UnparsableCell("event must be 0 or 1", row=row + 1, column=schema.event_column)

    if schema.id_column in frame.columns:
        ids = tuple(frame[schema.id_column].str.strip())
    else:
        logger.warning(f"No '{schema.id_column}' column in {path}; generating row ids")
        ids = tuple(f"row-{i}" for i in range(len(frame)))

    cohort = Cohort(schema, features, arms, times, events.astype(bool), ids)
    logger.info(
        f"Loaded {cohort.n} patients from {Path(path).name} "
        f"({int(cohort.missing_mask.sum())} missing cells)"
    )
    return cohort


def write_cohort(cohort: Cohort, path: Union[str, Path]) -> None:
    """Write a cohort in the format load_cohort reads (12 significant digits)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cohort.to_frame().to_csv(path, index=False, na_rep="", float_format=FLOAT_FORMAT, encoding="utf-8")


# ============================================================================
# Operations
# ============================================================================

def derive_labels(cohort: Cohort, horizon_days: float = DEFAULT_HORIZON_DAYS) -> List[BinaryLabel]:
    """
    Label each patient's outcome at the horizon.

    bad: death observed at or before the horizon. good: no death by the
    horizon and follow-up reaching it. indeterminate: censored before the
    horizon.
    """
    if not horizon_days > 0:
        raise InvalidConfig(f"horizon_days must be positive, got {horizon_days}")
    labels = []
    for time, event in zip(cohort.times, cohort.events):
        if event and time <= horizon_days:
            labels.append(BinaryLabel.BAD)
        elif time >= horizon_days:
            labels.append(BinaryLabel.GOOD)
        else:
            labels.append(BinaryLabel.INDETERMINATE)
    return labels


def split_by_arm(cohort: Cohort) -> Tuple[Cohort, Cohort]:
    """Partition a cohort into its SAVR and TAVR rows, preserving order."""
    savr = cohort.arms == TreatmentArm.SAVR
    return cohort.subset(savr), cohort.subset(~savr)


def concat_cohorts(cohorts: Iterable[Cohort], schema: Optional[FeatureSchema] = None) -> Cohort:
    """Stack cohorts sharing one schema."""
    cohorts = list(cohorts)
    if not cohorts and schema is None:
        raise InvalidConfig("concat_cohorts needs at least one cohort or an explicit schema")
    schema = schema or cohorts[0].schema
    for other in cohorts:
        if other.schema != schema:
            raise SchemaMismatch("cannot concatenate cohorts with different schemas")
    return Cohort(
        schema=schema,
        features=np.vstack([c.features for c in cohorts]) if cohorts else np.empty((0, schema.p)),
        arms=np.concatenate([c.arms for c in cohorts]) if cohorts else np.empty(0, dtype=np.int8),
        times=np.concatenate([c.times for c in cohorts]) if cohorts else np.empty(0),
        events=np.concatenate([c.events for c in cohorts]) if cohorts else np.empty(0, dtype=bool),
        ids=tuple(i for c in cohorts for i in c.ids),
    )
