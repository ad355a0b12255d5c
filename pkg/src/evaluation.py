"""
Policy evaluation metrics.

Sensitivity is the share of bad-outcome patients whose prescription differs
from the arm they received; specificity is the share of good-outcome patients
whose prescription matches it. Indeterminate patients are excluded from both
and from the leaf-level analysis, but count toward concordance and policy
value. Confidence intervals are percentile bootstraps over patients with the
tree, its leaves and the rewards held fixed.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import colorlog
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, Field

from src.cohort import BinaryLabel, Cohort, TreatmentArm, label_codes
from src.config import (
    DEFAULT_CI_LEVEL,
    DEFAULT_N_BOOT,
    MAX_SKIPPED_REPLICATE_FRACTION,
    N_JOBS,
    RANDOM_BASELINE_DRAWS,
)
from src.errors import (
    DegenerateResample,
    EmptyBadSet,
    EmptyGoodSet,
    InconsistentDimensions,
    InvalidConfig,
    NumericalError,
    ZeroObservedRate,
    ZeroRealValue,
)
from src.policy_tree import prescribe_many, route

logger = colorlog.getLogger(__name__)

BASELINES = ("all_savr", "all_tavr", "random", "policy", "oracle")


def _arrays(prescribed, received, labels=None):
    prescribed = np.asarray(prescribed, dtype=int)
    received = np.asarray(received, dtype=int)
    if prescribed.shape != received.shape:
        raise InconsistentDimensions(
            f"{prescribed.size} prescriptions but {received.size} received arms", stage="evaluate"
        )
    if labels is None:
        return prescribed, received, None
    codes = labels if isinstance(labels, np.ndarray) and labels.dtype == np.int8 else label_codes(labels)
    if codes.shape != received.shape:
        raise InconsistentDimensions(f"{codes.size} labels but {received.size} patients", stage="evaluate")
    return prescribed, received, codes


# ============================================================================
# Agreement metrics
# ============================================================================

def sensitivity(prescribed, received, labels) -> float:
    """|bad and prescription != received| / |bad|."""
    prescribed, received, codes = _arrays(prescribed, received, labels)
    bad = codes == 1
    if not bad.any():
        raise EmptyBadSet("no bad-outcome patients", stage="evaluate")
    return float((prescribed[bad] != received[bad]).sum() / bad.sum())


def specificity(prescribed, received, labels) -> float:
    """|good and prescription == received| / |good|."""
    prescribed, received, codes = _arrays(prescribed, received, labels)
    good = codes == 0
    if not good.any():
        raise EmptyGoodSet("no good-outcome patients", stage="evaluate")
    return float((prescribed[good] == received[good]).sum() / good.sum())


def concordance(prescribed, received) -> float:
    """Share of all patients whose prescription matches the arm received."""
    prescribed, received, _ = _arrays(prescribed, received)
    if prescribed.size == 0:
        raise InconsistentDimensions("concordance needs at least one patient", stage="evaluate")
    return float((prescribed == received).mean())


# ============================================================================
# Policy value
# ============================================================================

def policy_value(gamma: np.ndarray, arms) -> float:
    """Mean predicted risk when each patient gets the given arm."""
    gamma = np.asarray(getattr(gamma, "gamma", gamma), dtype=float)
    arms = np.asarray(arms, dtype=int)
    return float(gamma[np.arange(arms.size), arms].mean())


def improvement(real_value: float, value: float) -> float:
    """Relative reduction (%) of predicted risk against real-life practice."""
    if not real_value > 0:
        raise ZeroRealValue("real-life policy value is zero", stage="evaluate")
    return 100.0 * (real_value - value) / real_value


def random_policy_risks(gamma: np.ndarray, seed: int, draws: int = RANDOM_BASELINE_DRAWS) -> np.ndarray:
    """Per-patient risk averaged over `draws` fair coin-flip prescriptions."""
    gamma = np.asarray(getattr(gamma, "gamma", gamma), dtype=float)
    rng = np.random.default_rng(seed)
    coins = rng.integers(0, 2, size=(draws, gamma.shape[0]))
    return np.take_along_axis(gamma.T, coins, axis=0).mean(axis=0)


def _per_patient_values(gamma: np.ndarray, received: np.ndarray, prescribed: np.ndarray, seed: int) -> Dict[str, np.ndarray]:
    rows = np.arange(received.size)
    return {
        "real": gamma[rows, received],
        "all_savr": gamma[:, TreatmentArm.SAVR],
        "all_tavr": gamma[:, TreatmentArm.TAVR],
        "random": random_policy_risks(gamma, seed),
        "policy": gamma[rows, prescribed],
        "oracle": gamma.min(axis=1),
    }


def policy_improvements(rewards, received, tree, features, seed: int = 0) -> Dict[str, float]:
    """
    Improvement (%) of each baseline and of the tree over real-life practice.

    Keys: all_savr, all_tavr, random (mean over seeded coin-flip redraws),
    policy (the tree) and oracle (row-wise argmin of gamma).
    """
    gamma = np.asarray(getattr(rewards, "gamma", rewards), dtype=float)
    received = np.asarray(received, dtype=int)
    if gamma.shape != (received.size, 2):
        raise InconsistentDimensions("rewards rows differ from patients", stage="evaluate")
    prescribed = prescribe_many(tree, features)
    values = _per_patient_values(gamma, received, prescribed, seed)
    real = float(values["real"].mean())
    return {name: improvement(real, float(values[name].mean())) for name in BASELINES}


# ============================================================================
# Leaf-level analysis
# ============================================================================

@dataclass(frozen=True)
class LeafAnalysis:
    """Observed versus leaf-imputed bad-outcome rates."""

    improvement: float
    observed_rate: float
    imputed_rate: float
    fallback_leaves: Tuple[int, ...] = ()
    warnings: List[str] = field(default_factory=list)


def _leaf_rates(leaves, prescribed, received, codes) -> Tuple[float, float, Tuple[int, ...]]:
    determinate = codes >= 0
    leaves, prescribed, received, codes = (
        leaves[determinate], prescribed[determinate], received[determinate], codes[determinate]
    )
    if codes.size == 0:
        raise ZeroObservedRate("no determinate patients", stage="evaluate")
    observed = codes.astype(float)
    imputed = observed.copy()
    fallback = []
    for leaf in np.unique(leaves):
        in_leaf = leaves == leaf
        disagree = in_leaf & (prescribed != received)
        if not disagree.any():
            continue
        # prescription is constant within a leaf
        arm = prescribed[in_leaf][0]
        reference = in_leaf & (received == arm)
        if not reference.any():
            fallback.append(int(leaf))
            continue
        imputed[disagree] = observed[reference].mean()
    observed_rate = float(observed.mean())
    if observed_rate == 0:
        raise ZeroObservedRate("observed bad-outcome rate is zero", stage="evaluate")
    return observed_rate, float(imputed.mean()), tuple(fallback)


def leaf_level_details(tree, features, received, labels) -> LeafAnalysis:
    """
    Model-free improvement from leaf-mates who received the prescribed arm.

    Patients whose prescription matches reality keep their observed outcome;
    the others take the bad-outcome rate of determinate leaf-mates who
    received the prescribed arm. A leaf with no such leaf-mates keeps
    observed outcomes and is reported.
    """

    leaves = route(tree, features)
    prescribed, received, codes = _arrays(tree.prescription[leaves], received, labels)
    observed_rate, imputed_rate, fallback = _leaf_rates(leaves, prescribed, received, codes)
    warnings = []
    for leaf in fallback:
        message = f"Leaf {leaf} has no patients who received its prescription; observed outcomes kept"
        logger.warning(message)
        warnings.append(message)
    return LeafAnalysis(
        improvement=100.0 * (observed_rate - imputed_rate) / observed_rate,
        observed_rate=observed_rate,
        imputed_rate=imputed_rate,
        fallback_leaves=fallback,
        warnings=warnings,
    )


def leaf_level_analysis(tree, features, received, labels) -> float:
    """Leaf-level improvement (%) in observed bad-outcome rate."""
    return leaf_level_details(tree, features, received, labels).improvement


# ============================================================================
# Bootstrap
# ============================================================================

def _check_bootstrap(n_boot: int, level: float) -> None:
    if n_boot < 100:
        raise InvalidConfig(f"n_boot must be at least 100, got {n_boot}", stage="evaluate")
    if not 0 < level < 1:
        raise InvalidConfig(f"level must be in (0, 1), got {level}", stage="evaluate")


def _replicates(statistics, n: int, seeds) -> Dict[str, List[float]]:
    values = {name: [] for name in statistics}
    for seed_sequence in seeds:
        indices = np.random.default_rng(seed_sequence).integers(0, n, size=n)
        for name, statistic in statistics.items():
            try:
                values[name].append(float(statistic(indices)))
            except NumericalError:
                values[name].append(float("nan"))
    return values


def bootstrap_many(
    statistics: Dict[str, Callable[[np.ndarray], float]],
    n: int,
    n_boot: int = DEFAULT_N_BOOT,
    level: float = DEFAULT_CI_LEVEL,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> Dict[str, Tuple[float, float]]:
    """
    Percentile CIs for several statistics over the same patient resamples.

    Each statistic receives resampled row indices. Replicate b draws from
    SeedSequence(seed).spawn(n_boot)[b], so results do not depend on n_jobs.
    A NumericalError inside a statistic skips that replicate; 1% or more
    skipped raises DegenerateResample.
    """
    _check_bootstrap(n_boot, level)
    if n < 1:
        raise InvalidConfig("cannot bootstrap an empty sample", stage="evaluate")
    children = np.random.SeedSequence(seed).spawn(n_boot)
    workers = max(1, min(n_jobs or N_JOBS, n_boot))
    chunks = [children[i::workers] for i in range(workers)]
    parts = Parallel(n_jobs=workers)(delayed(_replicates)(statistics, n, chunk) for chunk in chunks)

    lower_q, upper_q = (1.0 - level) / 2.0, 1.0 - (1.0 - level) / 2.0
    intervals = {}
    for name in statistics:
        # chunk i holds replicates i, i + workers, ...; restore replicate order
        ordered = np.empty(n_boot)
        for i, part in enumerate(parts):
            ordered[i::workers] = part[name]
        skipped = int(np.isnan(ordered).sum())
        if skipped >= MAX_SKIPPED_REPLICATE_FRACTION * n_boot and skipped > 0:
            raise DegenerateResample(
                f"{skipped} of {n_boot} bootstrap replicates were degenerate", stage="evaluate", statistic=name
            )
        if skipped:
            logger.warning(f"Skipped {skipped} degenerate bootstrap replicates for {name}")
        kept = ordered[~np.isnan(ordered)]
        low, high = np.quantile(kept, [lower_q, upper_q])
        intervals[name] = (float(low), float(high))
    return intervals


def bootstrap_ci(
    statistic: Callable[[np.ndarray], float],
    n: int,
    n_boot: int = DEFAULT_N_BOOT,
    level: float = DEFAULT_CI_LEVEL,
    seed: int = 0,
    n_jobs: Optional[int] = None,
) -> Tuple[float, float]:
    """Percentile CI of statistic(indices) over n_boot patient resamples."""
    return bootstrap_many({"statistic": statistic}, n, n_boot, level, seed, n_jobs)["statistic"]


# ============================================================================
# Report
# ============================================================================

class MetricEstimate(BaseModel):
    """Point estimate with its bootstrap interval."""

    estimate: float = Field(..., description="Point estimate on the full cohort")
    ci_low: float = Field(..., description="Lower percentile bound")
    ci_high: float = Field(..., description="Upper percentile bound")


class EvalReport(BaseModel):
    """All evaluation metrics of a policy tree on one cohort."""

    sensitivity: MetricEstimate = Field(..., description="Bad-outcome patients re-prescribed")
    specificity: MetricEstimate = Field(..., description="Good-outcome patients kept on their arm")
    concordance: MetricEstimate = Field(..., description="Prescriptions matching practice")
    baseline_improvements: Dict[str, MetricEstimate] = Field(
        default_factory=dict, description="Improvement (%) over practice per policy"
    )
    leaf_improvement: Optional[MetricEstimate] = Field(None, description="Leaf-level improvement (%)")
    n_good: int = Field(..., ge=0)
    n_bad: int = Field(..., ge=0)
    n_indeterminate: int = Field(..., ge=0)
    seed: int = Field(..., description="Evaluation seed")
    n_boot: int = Field(..., description="Bootstrap replicates")
    level: float = Field(..., description="Confidence level")
    warnings: List[str] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        """Flat (metric, estimate, ci_low, ci_high) table."""
        records = [
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("concordance", self.concordance),
        ]
        records += [(f"improvement_{name}", m) for name, m in self.baseline_improvements.items()]
        if self.leaf_improvement is not None:
            records.append(("leaf_improvement", self.leaf_improvement))
        return pd.DataFrame(
            [(name, m.estimate, m.ci_low, m.ci_high) for name, m in records],
            columns=["metric", "estimate", "ci_low", "ci_high"],
        )


def _estimate(point: float, interval: Tuple[float, float]) -> MetricEstimate:
    # percentile intervals of non-monotone statistics can miss the point estimate
    return MetricEstimate(estimate=point, ci_low=min(interval[0], point), ci_high=max(interval[1], point))


def evaluate(
    tree,
    cohort: Cohort,
    labels: Sequence[BinaryLabel],
    rewards=None,
    seed: int = 0,
    n_boot: int = DEFAULT_N_BOOT,
    level: float = DEFAULT_CI_LEVEL,
    n_jobs: Optional[int] = None,
) -> EvalReport:
    """
    Evaluate a fitted tree on a cohort.

    Args:
        tree: Fitted PolicyTree
        cohort: Imputed cohort to evaluate on (training or external)
        labels: Horizon labels of the cohort
        rewards: Counterfactual risks aligned with the cohort; None skips
            the policy-value improvements
        seed: Seed of the random baseline and the bootstrap
        n_boot: Bootstrap replicates
        level: Confidence level
        n_jobs: Parallel workers over replicates

    Returns:
        EvalReport
    """

    _check_bootstrap(n_boot, level)
    codes = label_codes(labels)
    received = np.asarray(cohort.arms, dtype=int)
    leaves = route(tree, cohort)
    prescribed = tree.prescription[leaves].astype(int)
    if codes.size != cohort.n:
        raise InconsistentDimensions("labels length differs from cohort size", stage="evaluate")

    statistics = {
        "sensitivity": lambda idx: sensitivity(prescribed[idx], received[idx], codes[idx]),
        "specificity": lambda idx: specificity(prescribed[idx], received[idx], codes[idx]),
        "concordance": lambda idx: concordance(prescribed[idx], received[idx]),
    }
    points = {name: statistic(np.arange(cohort.n)) for name, statistic in statistics.items()}

    if rewards is not None:
        gamma = np.asarray(getattr(rewards, "gamma", rewards), dtype=float)
        if gamma.shape != (cohort.n, 2):
            raise InconsistentDimensions("rewards rows differ from cohort size", stage="evaluate")
        values = _per_patient_values(gamma, received, prescribed, seed)
        for name in BASELINES:
            statistics[f"improvement_{name}"] = (
                lambda idx, v=values[name]: improvement(values["real"][idx].mean(), v[idx].mean())
            )
            points[f"improvement_{name}"] = improvement(values["real"].mean(), values[name].mean())

    warnings: List[str] = []
    leaf_point = None
    try:
        analysis = leaf_level_details(tree, cohort, received, codes)
        leaf_point = analysis.improvement
        warnings.extend(analysis.warnings)
        statistics["leaf_improvement"] = lambda idx: _leaf_improvement(
            leaves[idx], prescribed[idx], received[idx], codes[idx]
        )
    except ZeroObservedRate as exc:
        message = f"Leaf-level analysis skipped: {exc.message}"
        logger.warning(message)
        warnings.append(message)

    intervals = bootstrap_many(statistics, cohort.n, n_boot, level, seed, n_jobs)
    report = EvalReport(
        sensitivity=_estimate(points["sensitivity"], intervals["sensitivity"]),
        specificity=_estimate(points["specificity"], intervals["specificity"]),
        concordance=_estimate(points["concordance"], intervals["concordance"]),
        baseline_improvements={
            name: _estimate(points[f"improvement_{name}"], intervals[f"improvement_{name}"])
            for name in BASELINES
            if f"improvement_{name}" in points
        },
        leaf_improvement=(
            _estimate(leaf_point, intervals["leaf_improvement"]) if leaf_point is not None else None
        ),
        n_good=int((codes == 0).sum()),
        n_bad=int((codes == 1).sum()),
        n_indeterminate=int((codes < 0).sum()),
        seed=seed,
        n_boot=n_boot,
        level=level,
        warnings=warnings,
    )
    logger.info(
        f"Sensitivity {report.sensitivity.estimate:.3f}, specificity {report.specificity.estimate:.3f}, "
        f"concordance {report.concordance.estimate:.3f}"
    )
    return report


def _leaf_improvement(leaves, prescribed, received, codes) -> float:
    observed_rate, imputed_rate, _ = _leaf_rates(leaves, prescribed, received, codes)
    return 100.0 * (observed_rate - imputed_rate) / observed_rate


def write_eval_report(report: EvalReport, json_path: Union[str, Path], csv_path: Union[str, Path]) -> None:
    """Write the report as sorted-key JSON and as the flat metric table."""
    Path(json_path).parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
    report.to_frame().to_csv(csv_path, index=False, float_format="%.12g")


# ============================================================================
# Observed mortality
# ============================================================================

def mortality_summary(cohort: Cohort, labels: Sequence[BinaryLabel]) -> Dict[str, float]:
    """Observed horizon mortality (%) overall and per arm over determinate patients."""
    codes = label_codes(labels)
    summary = {}
    for name, mask in (
        ("overall", np.ones(cohort.n, dtype=bool)),
        ("savr", cohort.arms == TreatmentArm.SAVR),
        ("tavr", cohort.arms == TreatmentArm.TAVR),
    ):
        determinate = mask & (codes >= 0)
        summary[f"n_{name}"] = int(mask.sum())
        summary[f"mortality_{name}"] = (
            100.0 * float((codes[determinate] == 1).mean()) if determinate.any() else float("nan")
        )
    return summary


def mortality_comparison(
    pre: Cohort, pre_labels: Sequence[BinaryLabel], post: Cohort, post_labels: Sequence[BinaryLabel]
) -> pd.DataFrame:
    """Observed mortality before and after matching, one row per group."""
    before = mortality_summary(pre, pre_labels)
    after = mortality_summary(post, post_labels)
    return pd.DataFrame([
        {
            "group": group,
            "n_pre": before[f"n_{group}"],
            "mortality_pre": before[f"mortality_{group}"],
            "n_post": after[f"n_{group}"],
            "mortality_post": after[f"mortality_{group}"],
        }
        for group in ("overall", "savr", "tavr")
    ])
