"""
Run manifest and run report.

manifest.json records what is needed to replay a run: the configuration hash,
seed, digests of input files and of every stage output, package versions and
stage timings. run_report.json collects per-stage summaries. Both files are
merged incrementally, so stages invoked one at a time build the same
documents as a full pipeline run.
"""

import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Union

import colorlog
from pydantic import BaseModel, Field

import src

logger = colorlog.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
RUN_REPORT_FILE = "run_report.json"
TRACKED_PACKAGES = ("numpy", "scipy", "pandas", "joblib", "pydantic")


class RunManifest(BaseModel):
    """Replay record of one output directory."""

    config_hash: str = Field("", description="sha256 of the result-affecting configuration")
    seed: int = Field(0, description="Run seed")
    config: Dict[str, Any] = Field(default_factory=dict, description="Result-affecting configuration")
    stage_timings: Dict[str, float] = Field(default_factory=dict, description="Seconds per stage")
    input_file_digests: Dict[str, str] = Field(default_factory=dict, description="sha256 per input file")
    versions: Dict[str, str] = Field(default_factory=dict, description="Interpreter and package versions")
    stage_outputs: Dict[str, List[str]] = Field(
        default_factory=dict, description="Artifacts per stage, relative to the output directory"
    )
    output_digests: Dict[str, str] = Field(default_factory=dict, description="sha256 per artifact")


def file_digest(path: Union[str, Path]) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            sha.update(block)
    return sha.hexdigest()


def config_hash(config: Dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version(), "valve-policy": src.__version__}
    for package in TRACKED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def _write_json(document: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(out_dir: Union[str, Path]) -> RunManifest:
    path = Path(out_dir) / MANIFEST_FILE
    if not path.exists():
        return RunManifest()
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest.model_validate(json.load(f))
    except (json.JSONDecodeError, ValueError):
        logger.warning(f"Could not parse existing manifest {path}; starting a new one")
        return RunManifest()


def record_stage(
    out_dir: Union[str, Path],
    stage: str,
    config: Dict[str, Any],
    seed: int,
    outputs: List[str],
    inputs: List[Union[str, Path]],
    seconds: float,
) -> RunManifest:
    """
    Merge one stage's outputs, input digests and timing into manifest.json.

    Args:
        out_dir: Output directory holding the manifest
        stage: Stage name
        config: Result-affecting configuration
        seed: Run seed
        outputs: Artifact file names relative to out_dir
        inputs: Input files read from outside out_dir
        seconds: Wall-clock duration of the stage

    Returns:
        The updated manifest
    """
    out_dir = Path(out_dir)
    manifest = load_manifest(out_dir)
    manifest.config = config
    manifest.config_hash = config_hash(config)
    manifest.seed = seed
    manifest.versions = package_versions()
    manifest.stage_timings[stage] = round(seconds, 3)
    manifest.stage_outputs[stage] = sorted(outputs)
    for name in outputs:
        manifest.output_digests[name] = file_digest(out_dir / name)
    for path in inputs:
        manifest.input_file_digests[Path(path).name] = file_digest(path)
    _write_json(manifest.model_dump(mode="json"), out_dir / MANIFEST_FILE)
    return manifest


def update_run_report(out_dir: Union[str, Path], stage: str, summary: Dict[str, Any]) -> Dict[str, Any]:
    """Merge a stage summary into run_report.json, replacing that stage's previous entry."""
    path = Path(out_dir) / RUN_REPORT_FILE
    report: Dict[str, Any] = {}
    if path.exists():
        try:
            with open(path, "r", encoding="utf-8") as f:
                report = json.load(f)
        except json.JSONDecodeError:
            logger.warning(f"Could not parse existing run report: {path}")
    report[stage] = summary
    _write_json(report, path)
    return report


def read_run_report(out_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(out_dir) / RUN_REPORT_FILE
    if not path.exists():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
