"""
Dagster Pipeline for the SAVR/TAVR Treatment-Policy Toolkit

This pipeline orchestrates the full prescriptive workflow:
1. Generate (or ingest) the observational cohort
2. Impute missing covariates and check baseline balance
3. Match SAVR and TAVR patients within STS risk buckets
4. Fit per-arm survival forests and estimate counterfactual risks
5. Sweep sample weights, fit the policy tree and evaluate it
"""

from typing import List, Optional

from dagster import (
    Config,
    Definitions,
    OpExecutionContext,
    job,
    op,
)

from src.config import (
    DEFAULT_BUCKETS,
    DEFAULT_CI_LEVEL,
    DEFAULT_FOREST_MIN_LEAF,
    DEFAULT_N_BOOT,
    DEFAULT_N_TREES,
    DEFAULT_PROGNOSTIC_WEIGHT,
    DEFAULT_RESTARTS,
    DEFAULT_STS_FEATURE,
    DEFAULT_TREE_DEPTH,
    DEFAULT_TREE_MIN_LEAF,
    DEFAULT_WEIGHT_GRID,
    OUTPUT_DIR,
)
from src.logger import setup_logging
from src.stages import RunConfig, run_stage


class PipelineConfig(Config):
    """Run configuration supplied through the Dagster launchpad."""

    out_dir: str = OUTPUT_DIR
    seed: int = 0
    synth_config: Optional[str] = None
    input: Optional[str] = None
    schema_path: Optional[str] = None
    buckets: int = DEFAULT_BUCKETS
    sts_feature: str = DEFAULT_STS_FEATURE
    prognostic_weight: float = DEFAULT_PROGNOSTIC_WEIGHT
    n_trees: int = DEFAULT_N_TREES
    forest_min_leaf: int = DEFAULT_FOREST_MIN_LEAF
    depth: int = DEFAULT_TREE_DEPTH
    min_leaf: int = DEFAULT_TREE_MIN_LEAF
    restarts: int = DEFAULT_RESTARTS
    boot: int = DEFAULT_N_BOOT
    ci_level: float = DEFAULT_CI_LEVEL
    weight: Optional[float] = None
    weight_grid: List[float] = list(DEFAULT_WEIGHT_GRID)
    n_jobs: Optional[int] = None


def _run(context: OpExecutionContext, name: str, run: dict) -> dict:
    context.log.info(f"Running stage {name}...")
    summary = run_stage(name, RunConfig(**run))
    context.log.info(f"Stage {name} completed")
    context.log.debug(f"{name} summary: {summary}")
    return run


@op(
    description="Generate a synthetic cohort or validate and store the input cohort",
    tags={"component": "cohort", "stage": "extract"},
)
def prepare_cohort(context: OpExecutionContext, config: PipelineConfig) -> dict:
    """Resolve the run configuration and produce cohort.csv + schema.json."""
    setup_logging()
    run = RunConfig(**config.model_dump()).model_dump()
    if run["synth_config"]:
        _run(context, "synth", run)
    elif not run["input"]:
        raise ValueError("Either synth_config or input must be configured")
    return _run(context, "ingest", run)


@op(description="kNN imputation and pre-match balance", tags={"component": "imputation", "stage": "clean"})
def impute_and_balance(context: OpExecutionContext, run: dict) -> dict:
    _run(context, "impute", run)
    return _run(context, "balance", run)


@op(description="STS-stratified prognostic matching", tags={"component": "matching", "stage": "match"})
def match_cohort(context: OpExecutionContext, run: dict) -> dict:
    return _run(context, "match", run)


@op(
    description="Per-arm survival forests and the counterfactual risk matrix",
    tags={"component": "survival_forest", "stage": "counterfactuals"},
)
def estimate_counterfactuals(context: OpExecutionContext, run: dict) -> dict:
    _run(context, "fit-risk", run)
    return _run(context, "rewards", run)


@op(description="Sample-weight sweep and final policy tree", tags={"component": "policy_tree", "stage": "learn"})
def learn_policy(context: OpExecutionContext, run: dict) -> dict:
    _run(context, "sweep", run)
    return _run(context, "tree", run)


@op(description="Sensitivity, specificity and improvement estimates", tags={"component": "evaluation", "stage": "evaluate"})
def evaluate_policy(context: OpExecutionContext, run: dict) -> dict:
    return _run(context, "evaluate", run)


@job(
    description="Complete prescriptive pipeline: cohort, matching, counterfactuals, policy tree, evaluation",
    tags={"pipeline": "treatment_policy"},
)
def treatment_policy_pipeline() -> None:
    """
    Main pipeline job; ops run strictly in sequence because every stage
    reads the previous stage's artifacts from the output directory.
    """
    run = prepare_cohort()
    run = impute_and_balance(run)
    run = match_cohort(run)
    run = estimate_counterfactuals(run)
    run = learn_policy(run)
    evaluate_policy(run)


defs = Definitions(
    jobs=[treatment_policy_pipeline],
)
