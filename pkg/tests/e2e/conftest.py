"""Shared fixtures for end-to-end pipeline runs."""

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import pytest

from emocircuit.config import RunConfig
from emocircuit.harness import Pipeline

E2E_PAIRS = 12
E2E_PROBES = 8


def e2e_config(output_dir: Path, *, workers: int = 1) -> RunConfig:
    """Default model and coefficients, with pair and probe counts sized for a test session."""
    return RunConfig(
        seed=0,
        n_pairs=E2E_PAIRS,
        n_probes=E2E_PROBES,
        attribution_pairs=2,
        k_head=3,
        k_neuron=5,
        workers=workers,
        show_progress=False,
        dataset_path=None,
        weights_path=None,
        output_dir=str(output_dir),
    )


def run_files(root: Path) -> dict[str, bytes]:
    """Every file under a run directory, keyed by its relative path."""
    return {str(path.relative_to(root)): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


@dataclass
class PipelineRun:
    pipeline: Pipeline
    summary: dict[str, Any]
    root: Path


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory: pytest.TempPathFactory) -> PipelineRun:
    """One single-threaded full run shared by the session."""
    root = tmp_path_factory.mktemp("e2e_run")
    pipeline = Pipeline(e2e_config(root))
    summary = pipeline.run()
    return PipelineRun(pipeline, summary, root)
