"""
Synthetic confounded SAVR/TAVR cohorts with known potential outcomes.

Features are independent standard normals (x0, x1, ...) and Bernoulli(0.5)
indicators (b0, b1, ...), plus an STS-like risk score that tracks the frailty
feature x0 with correlation sts_loading. TAVR assignment follows a logistic
propensity in x0, so frailer patients are more likely to receive TAVR.
Survival under each arm is exponential, with a hazard set by axis-aligned
subgroup rules, so true horizon risks have the closed form 1 - exp(-h * horizon).
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import colorlog
import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from src.cohort import Cohort, FeatureKind, FeatureSchema, FeatureSpec, TreatmentArm
from src.config import DEFAULT_HORIZON_DAYS, DEFAULT_STS_FEATURE
from src.errors import InconsistentDimensions, InvalidConfig
from src.policy_tree import prescribe_many

logger = colorlog.getLogger(__name__)

FRAILTY_FEATURE = "x0"


class SubgroupRule(BaseModel):
    """Patients with feature > threshold get these per-arm hazard multipliers."""

    feature: str = Field(..., description="Feature the rule tests")
    threshold: float = Field(..., description="Rule applies when value > threshold")
    hazard_multiplier_savr: float = Field(..., gt=0, description="SAVR hazard multiplier")
    hazard_multiplier_tavr: float = Field(..., gt=0, description="TAVR hazard multiplier")


class SynthConfig(BaseModel):
    """Generator settings."""

    n: int = Field(1000, ge=10, description="Patients")
    p_continuous: int = Field(4, ge=1, description="Standard-normal features x0.. (x0 is the frailty feature)")
    p_binary: int = Field(2, ge=0, description="Bernoulli(0.5) features b0..")
    confounding_strength: float = Field(1.0, ge=0, description="Logistic coefficient of x0 in TAVR assignment")
    subgroup_rules: List[SubgroupRule] = Field(default_factory=list)
    base_hazard: float = Field(2e-4, gt=0, description="Per-day baseline hazard")
    censor_rate: float = Field(1e-4, ge=0, description="Per-day censoring hazard (0 = none)")
    frailty_log_hazard: float = Field(0.0, description="Log hazard ratio per unit of x0, both arms")
    tavr_hazard_ratio: float = Field(1.0, gt=0, description="Global TAVR hazard multiplier")
    include_sts: bool = Field(True, description="Add the STS-like risk feature")
    sts_loading: float = Field(0.995, ge=0, le=1, description="Correlation of the STS feature with x0")
    horizon_days: float = Field(DEFAULT_HORIZON_DAYS, gt=0, description="Horizon of the true risks")
    seed: int = Field(0, ge=0, description="Generator seed")

    @model_validator(mode="after")
    def _check_rules(self) -> "SynthConfig":
        names = set(feature_names(self))
        for rule in self.subgroup_rules:
            if rule.feature not in names:
                raise ValueError(f"subgroup rule uses unknown feature '{rule.feature}'")
        return self


def feature_names(config: SynthConfig) -> List[str]:
    names = [f"x{j}" for j in range(config.p_continuous)] + [f"b{j}" for j in range(config.p_binary)]
    if config.include_sts:
        names.append(DEFAULT_STS_FEATURE)
    return names


def synth_schema(config: SynthConfig) -> FeatureSchema:
    """Schema of the generated cohort."""
    columns = [FeatureSpec(name=f"x{j}", kind=FeatureKind.CONTINUOUS) for j in range(config.p_continuous)]
    columns += [FeatureSpec(name=f"b{j}", kind=FeatureKind.BINARY) for j in range(config.p_binary)]
    if config.include_sts:
        columns.append(FeatureSpec(name=DEFAULT_STS_FEATURE, kind=FeatureKind.CONTINUOUS))
    return FeatureSchema(
        columns=tuple(columns),
        treatment_column="treatment",
        time_column="time",
        event_column="event",
        id_column="id",
    )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True per-arm hazards and horizon risks of a generated cohort."""

    hazards: np.ndarray
    potential_risks: np.ndarray
    true_optimal_arm: np.ndarray
    assignment_propensity: np.ndarray
    horizon_days: float

    def to_frame(self, ids) -> pd.DataFrame:
        return pd.DataFrame({
            "id": list(ids),
            "risk_savr": self.potential_risks[:, TreatmentArm.SAVR],
            "risk_tavr": self.potential_risks[:, TreatmentArm.TAVR],
            "optimal_arm": [TreatmentArm(int(a)).name for a in self.true_optimal_arm],
            "propensity": self.assignment_propensity,
        })


def true_hazards(config: SynthConfig, X: np.ndarray) -> np.ndarray:
    """N x 2 per-day hazards under SAVR and TAVR."""
    names = feature_names(config)
    hazards = np.full((X.shape[0], 2), config.base_hazard)
    hazards[:, TreatmentArm.TAVR] *= config.tavr_hazard_ratio
    for rule in config.subgroup_rules:
        applies = X[:, names.index(rule.feature)] > rule.threshold
        hazards[applies, TreatmentArm.SAVR] *= rule.hazard_multiplier_savr
        hazards[applies, TreatmentArm.TAVR] *= rule.hazard_multiplier_tavr
    if config.frailty_log_hazard:
        hazards *= np.exp(config.frailty_log_hazard * X[:, names.index(FRAILTY_FEATURE)])[:, None]
    return hazards


def generate_cohort(config: SynthConfig) -> Tuple[Cohort, GroundTruth]:
    """
    Draw a cohort and its ground truth.

    All draws come from one generator seeded with config.seed in a fixed
    order, so identical configs give bit-identical cohorts.
    """
    if not isinstance(config, SynthConfig):
        raise InvalidConfig("generate_cohort needs a SynthConfig", stage="synth")
    rng = np.random.default_rng(config.seed)
    n = config.n

    continuous = rng.standard_normal((n, config.p_continuous))
    binary = (rng.random((n, config.p_binary)) < 0.5).astype(float)
    sts_noise = rng.standard_normal(n)
    assignment = rng.random(n)
    event_draws = rng.exponential(1.0, n)
    censor_draws = rng.exponential(1.0, n)

    blocks = [continuous, binary]
    if config.include_sts:
        loading = config.sts_loading
        sts = loading * continuous[:, 0] + np.sqrt(1.0 - loading ** 2) * sts_noise
        blocks.append(sts[:, None])
    X = np.hstack(blocks)

    propensity = 1.0 / (1.0 + np.exp(-config.confounding_strength * continuous[:, 0]))
    arms = (assignment < propensity).astype(np.int8)

    hazards = true_hazards(config, X)
    received_hazard = hazards[np.arange(n), arms]
    event_times = event_draws / received_hazard
    if config.censor_rate > 0:
        censor_times = censor_draws / config.censor_rate
    else:
        censor_times = np.full(n, np.inf)
    times = np.minimum(event_times, censor_times)
    events = event_times <= censor_times

    potential = 1.0 - np.exp(-hazards * config.horizon_days)
    optimal = (potential[:, TreatmentArm.TAVR] < potential[:, TreatmentArm.SAVR]).astype(np.int8)

    cohort = Cohort(
        schema=synth_schema(config),
        features=X,
        arms=arms,
        times=times,
        events=events,
        ids=tuple(f"P{i:05d}" for i in range(n)),
    )
    truth = GroundTruth(
        hazards=hazards,
        potential_risks=potential,
        true_optimal_arm=optimal,
        assignment_propensity=propensity,
        horizon_days=config.horizon_days,
    )
    logger.info(
        f"Generated {n} synthetic patients (TAVR={int(arms.sum())}, events={int(events.sum())}, "
        f"confounding={config.confounding_strength})"
    )
    return cohort, truth


def policy_regret(tree, truth: GroundTruth, features) -> float:
    """Mean true-risk gap between the tree's prescriptions and the optimal arm."""
    prescribed = prescribe_many(tree, features)
    if prescribed.size != truth.potential_risks.shape[0]:
        raise InconsistentDimensions("features rows differ from ground truth", stage="synth")
    rows = np.arange(prescribed.size)
    risks = truth.potential_risks
    return float((risks[rows, prescribed] - risks[rows, truth.true_optimal_arm]).mean())


# ============================================================================
# Presets
# ============================================================================

def recovery_config(seed: int = 0, n: int = 2000) -> SynthConfig:
    """
    Cohort whose true optimal policy is a depth-2 tree.

    TAVR is optimal exactly when x0 > 0 and x1 <= 0; every region's risk gap
    exceeds 0.05 at five years.
    """
    return SynthConfig(
        n=n,
        p_continuous=3,
        p_binary=1,
        confounding_strength=1.0,
        subgroup_rules=[
            SubgroupRule(feature="x0", threshold=0.0, hazard_multiplier_savr=2.0, hazard_multiplier_tavr=1.0),
            SubgroupRule(feature="x1", threshold=0.0, hazard_multiplier_savr=1.0, hazard_multiplier_tavr=2.5),
        ],
        base_hazard=2e-4,
        censor_rate=5e-5,
        tavr_hazard_ratio=1.3,
        sts_loading=0.8,
        seed=seed,
    )


def imbalanced_config(seed: int = 0, n: int = 600) -> SynthConfig:
    """Cohort where TAVR is better on average but not everywhere."""
    return SynthConfig(
        n=n,
        p_continuous=3,
        p_binary=1,
        confounding_strength=1.0,
        subgroup_rules=[
            SubgroupRule(feature="x1", threshold=0.5, hazard_multiplier_savr=0.5, hazard_multiplier_tavr=1.5),
        ],
        base_hazard=2e-4,
        censor_rate=5e-5,
        tavr_hazard_ratio=0.7,
        sts_loading=0.8,
        seed=seed,
    )


# ============================================================================
# Files
# ============================================================================

def load_synth_config(path: Union[str, Path]) -> SynthConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except OSError as exc:
        raise InvalidConfig(f"cannot read synth config {path}: {exc.strerror}", stage="synth", path=str(path)) from exc
    except ValueError as exc:
        raise InvalidConfig(f"synth config {path} is not valid JSON: {exc}", stage="synth", path=str(path)) from exc
    try:
        return SynthConfig.model_validate(document)
    except ValueError as exc:
        raise InvalidConfig(f"invalid synth config {path}: {exc}", stage="synth") from exc


def save_synth_config(config: SynthConfig, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")


def write_truth_csv(truth: GroundTruth, ids, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    truth.to_frame(ids).to_csv(path, index=False, float_format="%.17g")


def load_truth_csv(path: Union[str, Path], config: Optional[SynthConfig] = None) -> GroundTruth:
    frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    potential = frame[["risk_savr", "risk_tavr"]].to_numpy(dtype=float)
    horizon = config.horizon_days if config is not None else DEFAULT_HORIZON_DAYS
    return GroundTruth(
        hazards=-np.log1p(-potential) / horizon,
        potential_risks=potential,
        true_optimal_arm=np.array([int(TreatmentArm[a]) for a in frame["optimal_arm"]], dtype=np.int8),
        assignment_propensity=frame["propensity"].to_numpy(dtype=float),
        horizon_days=horizon,
    )
