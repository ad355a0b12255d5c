"""
Command-line entry point.

    python -m src.cli pipeline --synth-config synth.json --seed 7 --out-dir output
    python -m src.cli evaluate --tree output/policy_tree.json --cohort external.csv --out-dir output

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical/degenerate error.
Failures print one structured line:
    ERROR stage=<stage> type=<ErrorType> <context> message=<text>
"""

import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

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
    LOG_DIR,
    N_JOBS,
    OUTPUT_DIR,
    WEIGHT_MODES,
)
from src.errors import EXIT_OK, EXIT_USAGE, PolicyError
from src.logger import setup_logging
from src.stages import STAGES, RunConfig, run_pipeline, run_stage

SUBCOMMANDS = list(STAGES) + ["pipeline"]


def _weight_grid(raw: str) -> List[float]:
    try:
        return [float(value) for value in raw.split(",") if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid weight grid '{raw}'") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="Cohort CSV to ingest")
    common.add_argument("--schema", dest="schema_path", help="Schema JSON")
    common.add_argument("--seed", type=int, default=0, help="Run seed (default: 0)")
    common.add_argument("--horizon-days", type=float, default=DEFAULT_HORIZON_DAYS)
    common.add_argument("--buckets", type=int, default=DEFAULT_BUCKETS, help="STS risk buckets")
    common.add_argument("--sts-feature", default=DEFAULT_STS_FEATURE, help="Feature used for risk buckets")
    common.add_argument(
        "--prognostic-weight", type=float, default=DEFAULT_PROGNOSTIC_WEIGHT,
        help="Weight of predicted-risk proximity in the matching distance (0 disables it)",
    )
    common.add_argument("--knn-k", type=int, default=DEFAULT_KNN_K, help="Imputation neighbors")
    common.add_argument("--weight", type=float, help="Fixed sample weight w (skips the sweep selection)")
    common.add_argument(
        "--weight-grid", type=_weight_grid, default=list(DEFAULT_WEIGHT_GRID),
        help="Comma-separated ascending weights",
    )
    common.add_argument("--weight-mode", choices=WEIGHT_MODES, default=DEFAULT_WEIGHT_MODE)
    common.add_argument("--depth", type=int, default=DEFAULT_TREE_DEPTH, help="Policy tree depth")
    common.add_argument("--min-leaf", type=int, default=DEFAULT_TREE_MIN_LEAF, help="Policy tree leaf size")
    common.add_argument("--restarts", type=int, default=DEFAULT_RESTARTS, help="Local search restarts")
    common.add_argument("--n-trees", type=int, default=DEFAULT_N_TREES, help="Survival trees per forest")
    common.add_argument(
        "--forest-min-leaf", type=int, default=DEFAULT_FOREST_MIN_LEAF, help="Survival forest leaf size"
    )
    common.add_argument("--boot", type=int, default=DEFAULT_N_BOOT, help="Bootstrap replicates")
    common.add_argument("--ci-level", type=float, default=DEFAULT_CI_LEVEL, help="Bootstrap interval level")
    common.add_argument("--out-dir", default=OUTPUT_DIR, help="Artifact directory")
    common.add_argument("--n-jobs", type=int, default=N_JOBS, help="Parallel workers")
    common.add_argument("--log-dir", default=LOG_DIR, help="Directory for a run log file")
    common.add_argument("--synth-config", help="Synthetic generator config JSON")
    common.add_argument("--tree", dest="tree_path", help="Policy tree JSON to evaluate")
    common.add_argument("--cohort", dest="cohort_path", help="External cohort CSV to evaluate on")

    parser = argparse.ArgumentParser(
        prog="valve-policy",
        description="Prescriptive SAVR/TAVR treatment-policy pipeline",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        commands.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "pipeline" else "run every stage")
    return parser


def run_subcommand(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run a stage or the whole pipeline, and map errors to exit codes.

    Args:
        argv: Arguments without the program name (default: sys.argv[1:])

    Returns:
        Process exit status
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logger = setup_logging(log_dir=args.log_dir)
    options = {key: value for key, value in vars(args).items() if key not in ("command", "log_dir")}
    try:
        config = RunConfig(**options)
    except ValidationError as exc:
        print(f"ERROR stage={args.command} type=Usage message={exc.errors()[0]['msg']}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "pipeline":
            run_pipeline(config)
        else:
            run_stage(args.command, config)
    except PolicyError as exc:
        exc.with_stage(args.command)
        logger.error(exc.message)
        print(exc.structured_line(), file=sys.stderr)
        return exc.exit_code

    logger.info(f"Done: artifacts in {config.out_dir}")
    return EXIT_OK


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
