"""
Covariate balance between treatment arms.

Absolute standardized mean differences (SMD) with sample standard deviations
(n-1 denominator), proportions for binary features, Welch t-tests and
two-proportion z-tests, and the love-plot table comparing balance before and
after matching. Arm "a" is SAVR and arm "b" is TAVR throughout.
"""

from pathlib import Path
from typing import Dict, List, Optional, Union

import colorlog
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import stats

from src.cohort import Cohort, FeatureKind, TreatmentArm
from src.config import SIGNIFICANCE_LEVEL, SMD_THRESHOLD
from src.errors import EmptyArm, TooFewObservations

logger = colorlog.getLogger(__name__)

UNDEFINED_SMD = "--"


# ============================================================================
# Report schemas
# ============================================================================

class BalanceRow(BaseModel):
    """Balance statistics for one feature."""

    feature: str = Field(..., description="Feature name")
    kind: FeatureKind = Field(..., description="continuous or binary")
    mean_a: float = Field(..., description="SAVR mean (proportion for binary)")
    mean_b: float = Field(..., description="TAVR mean (proportion for binary)")
    sd_a: float = Field(..., description="SAVR standard deviation")
    sd_b: float = Field(..., description="TAVR standard deviation")
    smd: Optional[float] = Field(None, ge=0, description="Absolute SMD; None when pooled variance is zero")
    p_value: Optional[float] = Field(None, ge=0, le=1, description="Two-sided test p-value")
    missing_fraction: float = Field(0.0, ge=0, le=1, description="Overall fraction missing")


class BalanceReport(BaseModel):
    """One BalanceRow per schema feature, ordered by descending SMD."""

    rows: List[BalanceRow] = Field(..., description="Per-feature balance")
    threshold: float = Field(SMD_THRESHOLD, description="SMD considered acceptable below this")
    n_a: int = Field(..., description="SAVR patients")
    n_b: int = Field(..., description="TAVR patients")

    def smd_by_feature(self) -> Dict[str, Optional[float]]:
        return {row.feature: row.smd for row in self.rows}

    def max_smd(self) -> float:
        defined = [row.smd for row in self.rows if row.smd is not None]
        return max(defined) if defined else 0.0

    def imbalanced(self) -> List[str]:
        return [row.feature for row in self.rows if row.smd is not None and row.smd > self.threshold]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump(mode="json") for row in self.rows])


# ============================================================================
# Statistics
# ============================================================================

def _observed(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values[~np.isnan(values)]


def _moments(values: np.ndarray, kind: FeatureKind):
    mean = float(values.mean())
    if kind == FeatureKind.BINARY:
        variance = mean * (1.0 - mean)
    else:
        variance = float(values.var(ddof=1)) if values.size > 1 else 0.0
    return mean, variance


def smd_from_summary(mean_a: float, mean_b: float, sd_a: float, sd_b: float) -> Optional[float]:
    """SMD from published means and standard deviations; None if both SDs are zero."""
    pooled = 0.5 * (sd_a ** 2 + sd_b ** 2)
    if pooled <= 0:
        return None
    return abs(mean_b - mean_a) / np.sqrt(pooled)


def compute_smd(values_a, values_b, kind: FeatureKind = FeatureKind.CONTINUOUS) -> Optional[float]:
    """
    Absolute standardized mean difference between two samples.

    Missing values are dropped first. Binary samples use proportions p and
    variances p(1-p).

    Returns:
        The SMD, or None when the pooled variance is zero (constant feature)
    """
    a, b = _observed(values_a), _observed(values_b)
    if a.size == 0 or b.size == 0:
        raise TooFewObservations("SMD needs at least one observation per arm")
    mean_a, var_a = _moments(a, FeatureKind(kind))
    mean_b, var_b = _moments(b, FeatureKind(kind))
    pooled = 0.5 * (var_a + var_b)
    if pooled <= 0:
        return None
    return float(abs(mean_b - mean_a) / np.sqrt(pooled))


def compute_p_value(values_a, values_b, kind: FeatureKind = FeatureKind.CONTINUOUS) -> float:
    """
    Two-sided p-value for a difference between arms.

    Continuous: Welch's unequal-variance t-test. Binary: pooled
    two-proportion z-test.
    """
    a, b = _observed(values_a), _observed(values_b)
    if a.size < 2 or b.size < 2:
        raise TooFewObservations("p-value needs at least two observations per arm")

    if FeatureKind(kind) == FeatureKind.BINARY:
        p_a, p_b = a.mean(), b.mean()
        pooled = (a.sum() + b.sum()) / (a.size + b.size)
        se = np.sqrt(pooled * (1.0 - pooled) * (1.0 / a.size + 1.0 / b.size))
        if se == 0:
            return 1.0
        z = (p_a - p_b) / se
        return float(np.clip(2.0 * stats.norm.sf(abs(z)), 0.0, 1.0))

    if a.var(ddof=1) == 0 and b.var(ddof=1) == 0:
        # both samples constant: identical or certainly different
        return 1.0 if a[0] == b[0] else 0.0
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(np.clip(result.pvalue, 0.0, 1.0))


def _row(cohort: Cohort, j: int) -> BalanceRow:
    spec = cohort.schema.columns[j]
    values = cohort.features[:, j]
    a = _observed(values[cohort.arms == TreatmentArm.SAVR])
    b = _observed(values[cohort.arms == TreatmentArm.TAVR])

    if a.size and b.size:
        mean_a, var_a = _moments(a, spec.kind)
        mean_b, var_b = _moments(b, spec.kind)
        smd = compute_smd(a, b, spec.kind)
    else:
        mean_a = mean_b = var_a = var_b = float("nan")
        smd = None
    try:
        p_value = compute_p_value(a, b, spec.kind)
    except TooFewObservations:
        p_value = None

    return BalanceRow(
        feature=spec.name,
        kind=spec.kind,
        mean_a=mean_a,
        mean_b=mean_b,
        sd_a=float(np.sqrt(var_a)),
        sd_b=float(np.sqrt(var_b)),
        smd=smd,
        p_value=p_value,
        missing_fraction=float(np.isnan(values).mean()) if values.size else 0.0,
    )


def balance_report(cohort: Cohort, threshold: float = SMD_THRESHOLD) -> BalanceReport:
    """
    Balance statistics for every feature of a cohort.

    Rows are ordered by descending SMD; undefined SMDs come last.
    """
    n_a = int((cohort.arms == TreatmentArm.SAVR).sum())
    n_b = int((cohort.arms == TreatmentArm.TAVR).sum())
    if n_a == 0 or n_b == 0:
        raise EmptyArm(f"balance needs both arms (SAVR={n_a}, TAVR={n_b})", stage="balance")

    rows = [_row(cohort, j) for j in range(cohort.schema.p)]
    rows.sort(key=lambda row: (row.smd is None, -(row.smd or 0.0)))

    undefined = [row.feature for row in rows if row.smd is None]
    if undefined:
        logger.warning(f"Undefined SMD (constant in both arms): {', '.join(undefined)}")
    return BalanceReport(rows=rows, threshold=threshold, n_a=n_a, n_b=n_b)


# ============================================================================
# Tables
# ============================================================================

def _format_cell(row: BalanceRow, arm: str) -> str:
    mean = row.mean_a if arm == "a" else row.mean_b
    sd = row.sd_a if arm == "a" else row.sd_b
    if row.kind == FeatureKind.BINARY:
        return f"{100 * mean:.1f}%"
    return f"{mean:.2f}±{sd:.2f}"


def baseline_table(cohort: Cohort) -> pd.DataFrame:
    """Baseline characteristics per arm with missingness, p-value and SMD."""
    report = balance_report(cohort)
    by_name = {row.feature: row for row in report.rows}
    records = []
    for name in cohort.schema.names:
        row = by_name[name]
        records.append({
            "feature": name,
            "savr": _format_cell(row, "a"),
            "tavr": _format_cell(row, "b"),
            "p_value": row.p_value,
            "missing_pct": round(100 * row.missing_fraction, 2),
            "smd": row.smd,
        })
    return pd.DataFrame.from_records(records)


def balance_comparison(pre: BalanceReport, post: BalanceReport) -> pd.DataFrame:
    """
    Love-plot data: SMD before and after matching for each feature.

    p_value is the pre-match test, which identifies the covariates that
    differed significantly before matching.
    """
    post_smd = post.smd_by_feature()
    records = []
    for row in pre.rows:
        after = post_smd.get(row.feature)
        records.append({
            "feature": row.feature,
            "smd_pre": row.smd,
            "smd_post": after,
            "p_value": row.p_value,
            "lower_or_equal": (
                row.smd is not None and after is not None and after <= row.smd
            ),
        })
    return pd.DataFrame.from_records(records, columns=["feature", "smd_pre", "smd_post", "p_value", "lower_or_equal"])


def significant_balance_summary(comparison: pd.DataFrame, alpha: float = SIGNIFICANCE_LEVEL) -> Dict[str, int]:
    """Counts of features and of pre-match significant features whose SMD did not grow."""
    significant = comparison[comparison["p_value"].fillna(1.0) < alpha]
    return {
        "n_features": int(len(comparison)),
        "n_lower_or_equal": int(comparison["lower_or_equal"].sum()),
        "n_significant_pre": int(len(significant)),
        "n_significant_improved": int(significant["lower_or_equal"].sum()),
    }


def write_balance_csv(table: pd.DataFrame, path: Union[str, Path]) -> None:
    """Write a balance table; undefined SMDs appear as "--"."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, na_rep=UNDEFINED_SMD, float_format="%.12g")
