"""Emotional-circuit discovery and VEENA intervention on a toy multimodal decoder."""

from emocircuit.config import RunConfig
from emocircuit.harness import Pipeline, run_pipeline

__all__ = ["Pipeline", "RunConfig", "run_pipeline"]
