"""Activation capture and the patch engine."""

from emocircuit.model import ActivationTrace, CaptureFilter
from emocircuit.trace._io import load_trace, save_trace
from emocircuit.trace._patch import (
    CONTRAST_THRESHOLD,
    HeadOutput,
    NeuronActivation,
    PatchSpec,
    PatchTarget,
    ResidualAt,
    TokenGroup,
    causal_effect,
    logit_difference,
    patch_hooks,
    run_with_capture,
    run_with_patches,
    union_of_residuals,
)

__all__ = [
    "CONTRAST_THRESHOLD",
    "ActivationTrace",
    "CaptureFilter",
    "HeadOutput",
    "NeuronActivation",
    "PatchSpec",
    "PatchTarget",
    "ResidualAt",
    "TokenGroup",
    "causal_effect",
    "load_trace",
    "logit_difference",
    "patch_hooks",
    "run_with_capture",
    "run_with_patches",
    "save_trace",
    "union_of_residuals",
]
