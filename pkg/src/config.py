"""
Configuration for the treatment-policy pipeline.

Documented defaults live here as module constants. Operational settings
(thread count, logging, output location) can be overridden from the
environment or a .env file.
"""

import os

import numpy as np
from dotenv import load_dotenv

load_dotenv()

# Outcome horizon (5 years of 365 days)
DEFAULT_HORIZON_DAYS = 1825.0

# Imputation
DEFAULT_KNN_K = 5

# Balance diagnostics
SMD_THRESHOLD = 0.1
SIGNIFICANCE_LEVEL = 0.05

# Prognostic matching
DEFAULT_BUCKETS = 5
DEFAULT_PROGNOSTIC_WEIGHT = 1.0
DEFAULT_STS_FEATURE = "sts_risk"

# Survival forest
DEFAULT_N_TREES = 500
DEFAULT_FOREST_MIN_LEAF = 10
DEFAULT_FOREST_MAX_DEPTH = None  # unlimited
OOB_RESEED_ATTEMPTS = 10
FOREST_FORMAT_VERSION = 1

# Policy tree
DEFAULT_TREE_DEPTH = 3
DEFAULT_TREE_MIN_LEAF = 20
DEFAULT_RESTARTS = 20
EXACT_SUBTREE_DEPTH = 2
TREE_FORMAT_VERSION = 1

# Sample weighting
DEFAULT_WEIGHT = 1.0
DEFAULT_WEIGHT_GRID = [round(1.0 + 0.2 * i, 1) for i in range(11)]  # 1.0 .. 3.0
WEIGHT_MODES = ("tree", "refit")
DEFAULT_WEIGHT_MODE = "tree"

# Evaluation
DEFAULT_N_BOOT = 1000
DEFAULT_CI_LEVEL = 0.95
RANDOM_BASELINE_DRAWS = 1000
MAX_SKIPPED_REPLICATE_FRACTION = 0.01

# Operational settings (overridable via .env)
N_JOBS = int(os.getenv("VALVE_N_JOBS", "1"))
LOG_LEVEL = os.getenv("VALVE_LOG_LEVEL", "INFO")
LOG_DIR = os.getenv("VALVE_LOG_DIR") or None
OUTPUT_DIR = os.getenv("VALVE_OUTPUT_DIR", "output")

# Per-stage seed derivation order. Appending is safe; reordering changes results.
SEED_STAGES = [
    "synth",
    "prognostic_risk",
    "forest_savr",
    "forest_tavr",
    "sweep",
    "tree",
    "evaluate",
]


def derive_seed(seed: int, stage: str) -> int:
    """
    Derive a stage-specific seed from the run seed.

    Args:
        seed: The single run-level seed
        stage: Stage name from SEED_STAGES

    Returns:
        A 32-bit non-negative integer seed for that stage
    """
    stage_index = SEED_STAGES.index(stage)
    sequence = np.random.SeedSequence([int(seed), stage_index])
    return int(sequence.generate_state(1)[0])
