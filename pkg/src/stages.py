"""
Pipeline stages with file-based handoffs.

Each stage reads its inputs from the output directory (or from paths in the
run configuration), writes its artifacts there, merges a summary into
run_report.json and records outputs, digests and timing in manifest.json.
The CLI subcommands and the Dagster ops call these same functions, so a
chained run and stage-by-stage invocations produce identical artifacts.
"""

import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import colorlog
import numpy as np
from pydantic import BaseModel, Field

from src.balance import (
    balance_comparison,
    balance_report,
    baseline_table,
    significant_balance_summary,
    write_balance_csv,
)
from src.cohort import (
    Cohort,
    FeatureSchema,
    TreatmentArm,
    derive_labels,
    load_cohort,
    load_schema,
    save_schema,
    split_by_arm,
    write_cohort,
)
from src.config import (
    DEFAULT_BUCKETS,
    DEFAULT_CI_LEVEL,
    DEFAULT_FOREST_MIN_LEAF,
    DEFAULT_HORIZON_DAYS,
    DEFAULT_KNN_K,
    DEFAULT_N_BOOT,
    DEFAULT_N_TREES,
    DEFAULT_PROGNOSTIC_WEIGHT,
    DEFAULT_RESTARTS,
    DEFAULT_STS_FEATURE,
    DEFAULT_TREE_DEPTH,
    DEFAULT_TREE_MIN_LEAF,
    DEFAULT_WEIGHT_GRID,
    DEFAULT_WEIGHT_MODE,
    OUTPUT_DIR,
    derive_seed,
)
from src.errors import InvalidConfig, MissingFeature, NoComparablePairs, PolicyError
from src.evaluation import evaluate, mortality_comparison, write_eval_report
from src.imputation import fit_imputer, impute, load_imputer, save_imputer
from src.manifest import read_run_report, record_stage, update_run_report
from src.matching import make_strata, match_within_strata, write_pairs_csv
from src.policy_tree import TreeParams, fit_policy_tree, leaf_table, load_tree, save_tree, tree_dot, tree_fingerprint
from src.rewards import align_rewards, best_uniform_arm, estimate_rewards, load_rewards_csv, write_rewards_csv
from src.survival_forest import (
    ForestParams,
    fit_forest,
    load_forest,
    oob_concordance,
    predict_risks,
    save_forest,
)
from src.synthetic import generate_cohort, load_synth_config, save_synth_config, write_truth_csv
from src.weighting import assign_weights, refit_rewards, weight_sweep, write_sweep_csv

logger = colorlog.getLogger(__name__)

# Artifact names inside the output directory
COHORT = "cohort.csv"
SCHEMA = "schema.json"
TRUTH = "truth.csv"
SYNTH_CONFIG = "synth_config.json"
IMPUTER = "imputer.json"
COHORT_IMPUTED = "cohort_imputed.csv"
BASELINE = "baseline.csv"
BALANCE = "balance.csv"
MORTALITY = "mortality.csv"
PAIRS = "matched_pairs.csv"
COHORT_MATCHED = "cohort_matched.csv"
FOREST_SAVR = "forest_savr.json"
FOREST_TAVR = "forest_tavr.json"
REWARDS = "rewards.csv"
SWEEP = "sweep.csv"
TREE_JSON = "policy_tree.json"
TREE_DOT = "policy_tree.dot"
LEAF_TABLE = "leaf_table.csv"
EVAL_JSON = "eval_report.json"
EVAL_CSV = "eval_report.csv"

PIPELINE_ORDER = ["synth", "ingest", "impute", "balance", "match", "fit-risk", "rewards", "sweep", "tree", "evaluate"]


class RunConfig(BaseModel):
    """Everything a stage needs; CLI flags map one-to-one onto these fields."""

    out_dir: str = Field(OUTPUT_DIR, description="Artifact directory")
    seed: int = Field(0, ge=0, description="Run seed; every stage seed derives from it")
    input: Optional[str] = Field(None, description="Cohort CSV to ingest")
    schema_path: Optional[str] = Field(None, description="Schema JSON of the input cohort")
    synth_config: Optional[str] = Field(None, description="Synthetic generator config JSON")
    tree_path: Optional[str] = Field(None, description="Policy tree JSON to evaluate")
    cohort_path: Optional[str] = Field(None, description="External cohort CSV to evaluate on")
    horizon_days: float = Field(DEFAULT_HORIZON_DAYS, gt=0)
    buckets: int = Field(DEFAULT_BUCKETS, ge=1)
    knn_k: int = Field(DEFAULT_KNN_K, ge=1)
    sts_feature: str = Field(DEFAULT_STS_FEATURE)
    prognostic_weight: float = Field(DEFAULT_PROGNOSTIC_WEIGHT, ge=0)
    weight: Optional[float] = Field(None, ge=1, description="Fixed weight; skips selection")
    weight_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_WEIGHT_GRID))
    weight_mode: str = Field(DEFAULT_WEIGHT_MODE)
    depth: int = Field(DEFAULT_TREE_DEPTH, ge=0)
    min_leaf: int = Field(DEFAULT_TREE_MIN_LEAF, ge=1)
    restarts: int = Field(DEFAULT_RESTARTS, ge=1)
    n_trees: int = Field(DEFAULT_N_TREES, ge=1)
    forest_min_leaf: int = Field(DEFAULT_FOREST_MIN_LEAF, ge=1)
    boot: int = Field(DEFAULT_N_BOOT, ge=1)
    ci_level: float = Field(DEFAULT_CI_LEVEL, gt=0, lt=1)
    n_jobs: Optional[int] = Field(None, description="Worker count; never affects results")

    def result_config(self) -> Dict[str, Any]:
        """Settings that can change artifacts (paths reduced to file names)."""
        document = self.model_dump(exclude={"out_dir", "n_jobs"})
        for key in ("input", "schema_path", "synth_config", "tree_path", "cohort_path"):
            if document[key] is not None:
                document[key] = Path(document[key]).name
        return document

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def forest_params(self, stage: str) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees, min_leaf=self.forest_min_leaf, seed=derive_seed(self.seed, stage)
        )

    def tree_params(self) -> TreeParams:
        return TreeParams(
            max_depth=self.depth,
            min_leaf=self.min_leaf,
            n_restarts=self.restarts,
            seed=derive_seed(self.seed, "tree"),
        )


StageResult = Tuple[Dict[str, Any], List[str], List[str]]


# ============================================================================
# Loading helpers
# ============================================================================

def _require(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise InvalidConfig(f"{path.name} not found; run '{producer}' first", stage=stage, path=str(path))
    return path


def _schema(config: RunConfig, stage: str) -> FeatureSchema:
    if config.schema_path:
        return load_schema(config.schema_path)
    return load_schema(_require(config.out / SCHEMA, stage, "ingest"))


def _load(config: RunConfig, name: str, stage: str, producer: str) -> Cohort:
    return load_cohort(_require(config.out / name, stage, producer), _schema(config, stage))


def _label_counts(labels) -> Dict[str, int]:
    counts = {"good": 0, "bad": 0, "indeterminate": 0}
    for label in labels:
        counts[label.value] += 1
    return counts


# ============================================================================
# Stages
# ============================================================================

def stage_synth(config: RunConfig) -> StageResult:
    """Generate a synthetic cohort plus its ground truth."""
    if not config.synth_config:
        raise InvalidConfig("--synth-config is required", stage="synth")
    synth = load_synth_config(config.synth_config)
    synth = synth.model_copy(update={"seed": derive_seed(config.seed, "synth")})
    cohort, truth = generate_cohort(synth)

    write_cohort(cohort, config.out / COHORT)
    save_schema(cohort.schema, config.out / SCHEMA)
    write_truth_csv(truth, cohort.ids, config.out / TRUTH)
    save_synth_config(synth, config.out / SYNTH_CONFIG)
    summary = {
        "n": cohort.n,
        "n_tavr": int(cohort.arms.sum()),
        "n_events": int(cohort.events.sum()),
        "generator_seed": synth.seed,
        "true_tavr_optimal_fraction": float(truth.true_optimal_arm.mean()),
    }
    return summary, [COHORT, SCHEMA, TRUTH, SYNTH_CONFIG], [config.synth_config]


def stage_ingest(config: RunConfig) -> StageResult:
    """Validate the input cohort and store it with its schema."""
    source = Path(config.input) if config.input else config.out / COHORT
    schema = _schema(config, "ingest")
    cohort = load_cohort(_require(source, "ingest", "synth"), schema)
    inputs = []
    if source.resolve() != (config.out / COHORT).resolve():
        write_cohort(cohort, config.out / COHORT)
        inputs.append(str(source))
    if config.schema_path:
        inputs.append(config.schema_path)
    save_schema(schema, config.out / SCHEMA)

    labels = derive_labels(cohort, config.horizon_days)
    summary = {
        "n": cohort.n,
        "n_savr": int((cohort.arms == TreatmentArm.SAVR).sum()),
        "n_tavr": int((cohort.arms == TreatmentArm.TAVR).sum()),
        "n_events": int(cohort.events.sum()),
        "missing_cells": int(cohort.missing_mask.sum()),
        "labels": _label_counts(labels),
    }
    return summary, [COHORT, SCHEMA], inputs


def stage_impute(config: RunConfig) -> StageResult:
    """Fit the kNN imputer on the cohort and fill its missing cells."""
    cohort = _load(config, COHORT, "impute", "ingest")
    model = fit_imputer(cohort, config.knn_k)
    imputed = impute(model, cohort, config.n_jobs)
    save_imputer(model, config.out / IMPUTER)
    write_cohort(imputed, config.out / COHORT_IMPUTED)
    summary = {
        "k": config.knn_k,
        "filled_cells": int(cohort.missing_mask.sum()),
        "complete_reference_rows": int(model.reference_values.shape[0]),
    }
    return summary, [IMPUTER, COHORT_IMPUTED], []


def stage_balance(config: RunConfig) -> StageResult:
    """Pre-match baseline characteristics and covariate balance."""
    cohort = _load(config, COHORT_IMPUTED, "balance", "impute")
    report = balance_report(cohort)
    write_balance_csv(baseline_table(cohort), config.out / BASELINE)
    summary = {
        "n_savr": report.n_a,
        "n_tavr": report.n_b,
        "max_smd": report.max_smd(),
        "imbalanced": report.imbalanced(),
    }
    return summary, [BASELINE], []


def _prognostic_scores(config: RunConfig, cohort: Cohort) -> Optional[np.ndarray]:
    if config.prognostic_weight <= 0:
        return None
    params = config.forest_params("prognostic_risk")
    savr, tavr = split_by_arm(cohort)
    forests = [fit_forest(arm_cohort, params, n_jobs=config.n_jobs) for arm_cohort in (savr, tavr)]
    return np.column_stack([
        predict_risks(forest, cohort.features, config.horizon_days, config.n_jobs) for forest in forests
    ])


def stage_match(config: RunConfig) -> StageResult:
    """STS-stratified prognostic matching and the before/after balance table."""
    cohort = _load(config, COHORT_IMPUTED, "match", "impute")
    if config.sts_feature not in cohort.schema.names:
        raise MissingFeature(
            f"STS feature '{config.sts_feature}' is not in the schema", stage="match", feature=config.sts_feature
        )
    strata = make_strata(cohort.column(config.sts_feature), config.buckets)
    matched = match_within_strata(
        cohort,
        strata,
        config.sts_feature,
        prognostic_weight=config.prognostic_weight,
        risk_scores=_prognostic_scores(config, cohort),
        n_jobs=config.n_jobs,
    )
    write_pairs_csv(matched, config.out / PAIRS)
    write_cohort(matched.cohort, config.out / COHORT_MATCHED)

    pre, post = balance_report(cohort), balance_report(matched.cohort)
    comparison = balance_comparison(pre, post)
    write_balance_csv(comparison, config.out / BALANCE)
    mortality_comparison(
        cohort, derive_labels(cohort, config.horizon_days),
        matched.cohort, derive_labels(matched.cohort, config.horizon_days),
    ).to_csv(config.out / MORTALITY, index=False, float_format="%.12g")

    summary = {
        "strata_boundaries": list(strata.boundaries),
        "buckets": strata.k,
        "pairs": len(matched.pairs),
        "kept": matched.cohort.n,
        "max_smd_pre": pre.max_smd(),
        "max_smd_post": post.max_smd(),
        "balance": significant_balance_summary(comparison),
        "warnings": matched.warnings,
    }
    return summary, [PAIRS, COHORT_MATCHED, BALANCE, MORTALITY], []


def _oob_c(forest, cohort: Cohort, horizon_days: float) -> Optional[float]:
    try:
        return oob_concordance(forest, cohort, horizon_days)
    except NoComparablePairs:
        logger.warning("OOB concordance undefined (no comparable pairs)")
        return None


def stage_fit_risk(config: RunConfig) -> StageResult:
    """One survival forest per arm on the matched cohort."""
    cohort = _load(config, COHORT_MATCHED, "fit-risk", "match")
    savr, tavr = split_by_arm(cohort)
    forest_savr = fit_forest(savr, config.forest_params("forest_savr"), n_jobs=config.n_jobs)
    forest_tavr = fit_forest(tavr, config.forest_params("forest_tavr"), n_jobs=config.n_jobs)
    save_forest(forest_savr, config.out / FOREST_SAVR)
    save_forest(forest_tavr, config.out / FOREST_TAVR)
    summary = {
        "n_trees": config.n_trees,
        "min_leaf": config.forest_min_leaf,
        "oob_c_savr": _oob_c(forest_savr, savr, config.horizon_days),
        "oob_c_tavr": _oob_c(forest_tavr, tavr, config.horizon_days),
    }
    return summary, [FOREST_SAVR, FOREST_TAVR], []


def _forests(config: RunConfig, stage: str):
    return (
        load_forest(_require(config.out / FOREST_SAVR, stage, "fit-risk")),
        load_forest(_require(config.out / FOREST_TAVR, stage, "fit-risk")),
    )


def stage_rewards(config: RunConfig) -> StageResult:
    """Predicted horizon risk of every matched patient under both arms."""
    cohort = _load(config, COHORT_MATCHED, "rewards", "match")
    forest_savr, forest_tavr = _forests(config, "rewards")
    rewards = estimate_rewards(cohort, forest_savr, forest_tavr, config.horizon_days, config.n_jobs)
    write_rewards_csv(rewards, config.out / REWARDS)
    summary = {
        "mean_risk_savr": float(rewards.gamma[:, TreatmentArm.SAVR].mean()),
        "mean_risk_tavr": float(rewards.gamma[:, TreatmentArm.TAVR].mean()),
        "t_star": best_uniform_arm(rewards).name,
    }
    return summary, [REWARDS], []


def _training_inputs(config: RunConfig, stage: str):
    cohort = _load(config, COHORT_MATCHED, stage, "match")
    rewards = load_rewards_csv(_require(config.out / REWARDS, stage, "rewards"), config.horizon_days)
    rewards = align_rewards(rewards, cohort)
    return cohort, rewards, derive_labels(cohort, config.horizon_days)


def stage_sweep(config: RunConfig) -> StageResult:
    """Refit the tree over the weight grid and select w."""
    cohort, rewards, labels = _training_inputs(config, "sweep")
    grid = [config.weight] if config.weight is not None else config.weight_grid
    result = weight_sweep(
        cohort,
        rewards,
        labels,
        grid,
        config.tree_params(),
        config.weight_mode,
        config.forest_params("sweep"),
        config.horizon_days,
        config.n_jobs,
    )
    write_sweep_csv(result, config.out / SWEEP)
    summary = {
        "selected_w": result.selected_w,
        "t_star": result.t_star,
        "mode": result.mode,
        "grid": grid,
    }
    return summary, [SWEEP], []


def stage_tree(config: RunConfig) -> StageResult:
    """Fit the final policy tree at the selected weight."""
    cohort, rewards, labels = _training_inputs(config, "tree")
    w = config.weight
    if w is None:
        w = read_run_report(config.out).get("sweep", {}).get("selected_w", 1.0)
    t_star = best_uniform_arm(rewards)
    weights = assign_weights(labels, cohort.arms, t_star, w)
    if config.weight_mode == "refit" and w != 1.0:
        rewards = refit_rewards(cohort, weights, config.forest_params("sweep"), config.horizon_days, config.n_jobs)

    tree = fit_policy_tree(
        cohort.features, rewards, weights, config.tree_params(), cohort.schema.names, config.n_jobs
    )
    save_tree(tree, config.out / TREE_JSON)
    (config.out / TREE_DOT).write_text(tree_dot(tree), encoding="utf-8")
    leaf_table(tree, cohort, labels).to_csv(config.out / LEAF_TABLE, index=False, float_format="%.12g")
    summary = {
        "w": w,
        "t_star": t_star.name,
        "max_depth": config.depth,
        "min_leaf": config.min_leaf,
        "restarts": config.restarts,
        "depth": tree.depth,
        "leaves": int(tree.leaves.size),
        "objective": tree.objective_value,
        "fingerprint": tree_fingerprint(tree),
    }
    return summary, [TREE_JSON, TREE_DOT, LEAF_TABLE], []


def _external_cohort(config: RunConfig) -> Tuple[Cohort, Optional[Any]]:
    cohort = load_cohort(config.cohort_path, _schema(config, "evaluate"))
    if cohort.missing_mask.any():
        model = load_imputer(_require(config.out / IMPUTER, "evaluate", "impute"))
        cohort = impute(model, cohort, config.n_jobs)
    rewards = None
    if (config.out / FOREST_SAVR).exists() and (config.out / FOREST_TAVR).exists():
        forest_savr, forest_tavr = _forests(config, "evaluate")
        rewards = estimate_rewards(cohort, forest_savr, forest_tavr, config.horizon_days, config.n_jobs)
    else:
        logger.warning("No fitted forests in the output directory; policy-value improvements skipped")
    return cohort, rewards


def stage_evaluate(config: RunConfig) -> StageResult:
    """Evaluate the tree on the training cohort or on an external cohort."""
    tree_file = Path(config.tree_path) if config.tree_path else config.out / TREE_JSON
    tree = load_tree(_require(tree_file, "evaluate", "tree"))
    inputs = [str(tree_file)] if config.tree_path else []

    if config.cohort_path:
        cohort, rewards = _external_cohort(config)
        inputs.append(config.cohort_path)
        suffix = "_external"
    else:
        cohort, rewards, _ = _training_inputs(config, "evaluate")
        suffix = ""
    labels = derive_labels(cohort, config.horizon_days)

    report = evaluate(
        tree, cohort, labels, rewards,
        seed=derive_seed(config.seed, "evaluate"),
        n_boot=config.boot,
        level=config.ci_level,
        n_jobs=config.n_jobs,
    )
    json_name, csv_name = f"eval_report{suffix}.json", f"eval_report{suffix}.csv"
    write_eval_report(report, config.out / json_name, config.out / csv_name)
    outputs = [json_name, csv_name]
    if suffix:
        leaf_name = f"leaf_table{suffix}.csv"
        leaf_table(tree, cohort, labels).to_csv(config.out / leaf_name, index=False, float_format="%.12g")
        outputs.append(leaf_name)

    summary = {
        "cohort": "external" if suffix else "matched",
        "n": cohort.n,
        "sensitivity": report.sensitivity.estimate,
        "specificity": report.specificity.estimate,
        "concordance": report.concordance.estimate,
        "warnings": report.warnings,
    }
    return summary, outputs, inputs


STAGES: Dict[str, Callable[[RunConfig], StageResult]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "impute": stage_impute,
    "balance": stage_balance,
    "match": stage_match,
    "fit-risk": stage_fit_risk,
    "rewards": stage_rewards,
    "sweep": stage_sweep,
    "tree": stage_tree,
    "evaluate": stage_evaluate,
}


def run_stage(name: str, config: RunConfig) -> Dict[str, Any]:
    """
    Run one stage and record it in the run report and the manifest.

    Args:
        name: Stage name from STAGES
        config: Run configuration

    Returns:
        The stage summary
    """
    if name not in STAGES:
        raise InvalidConfig(f"unknown stage '{name}'", stage=name)
    config.out.mkdir(parents=True, exist_ok=True)
    logger.info("=" * 60)
    logger.info(f"Stage: {name}")
    logger.info("=" * 60)

    started = time.perf_counter()
    try:
        summary, outputs, inputs = STAGES[name](config)
    except PolicyError as exc:
        raise exc.with_stage(name)
    elapsed = time.perf_counter() - started

    report_key = "evaluate-external" if name == "evaluate" and config.cohort_path else name
    update_run_report(config.out, report_key, summary)
    record_stage(config.out, report_key, config.result_config(), config.seed, outputs, inputs, elapsed)
    logger.info(f"Stage {name} finished in {elapsed:.1f}s ({', '.join(outputs)})")
    return summary


def run_pipeline(config: RunConfig) -> Dict[str, Dict[str, Any]]:
    """Chain every stage: matching, counterfactuals, weighting, policy learning, evaluation."""
    if not config.synth_config and not config.input:
        raise InvalidConfig("pipeline needs --synth-config or --input with --schema", stage="pipeline")
    stages = PIPELINE_ORDER if config.synth_config else PIPELINE_ORDER[1:]
    return {name: run_stage(name, config) for name in stages}
