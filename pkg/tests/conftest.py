"""
Shared fixtures: small schemas, hand-built cohorts and synthetic cohorts.
"""

import numpy as np
import pytest

from src.cohort import Cohort, FeatureKind, FeatureSchema, FeatureSpec
from src.synthetic import SubgroupRule, SynthConfig, generate_cohort


def make_schema(continuous=("age",), binary=()) -> FeatureSchema:
    columns = [FeatureSpec(name=name, kind=FeatureKind.CONTINUOUS) for name in continuous]
    columns += [FeatureSpec(name=name, kind=FeatureKind.BINARY) for name in binary]
    return FeatureSchema(columns=tuple(columns), treatment_column="treatment", time_column="time", event_column="event")


def make_cohort(features, arms, times=None, events=None, schema=None) -> Cohort:
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    n = features.shape[0]
    if schema is None:
        schema = make_schema(continuous=tuple(f"x{j}" for j in range(features.shape[1])))
    times = np.full(n, 2000.0) if times is None else times
    events = np.zeros(n, dtype=bool) if events is None else events
    return Cohort(schema, features, arms, times, events, tuple(f"id{i}" for i in range(n)))


@pytest.fixture
def clinical_schema() -> FeatureSchema:
    return make_schema(continuous=("age", "sts_risk"), binary=("diabetes",))


@pytest.fixture
def small_synth_config() -> SynthConfig:
    return SynthConfig(
        n=300,
        p_continuous=3,
        p_binary=1,
        confounding_strength=1.0,
        subgroup_rules=[
            SubgroupRule(feature="x1", threshold=0.0, hazard_multiplier_savr=0.5, hazard_multiplier_tavr=2.0),
        ],
        base_hazard=3e-4,
        censor_rate=5e-5,
        seed=11,
    )


@pytest.fixture
def small_synth(small_synth_config):
    return generate_cohort(small_synth_config)
