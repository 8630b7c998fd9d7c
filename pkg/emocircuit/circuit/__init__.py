"""
Circuit discovery: restoration-based head ranking, attribution to upstream neurons, saliency,
the logit lens and phase-level patching with knockout and recovery.
"""

from emocircuit.circuit._ablation import (
    HeadIntersection,
    KeywordGrid,
    KnockoutRecovery,
    PhasePatchResult,
    decodes_containing,
    head_intersection,
    keyword_frequency_grid,
    keyword_frequency_probe,
    knockout,
    knockout_hooks,
    knockout_recovery,
    phase_grid,
    phase_patch,
    random_heads,
    random_neurons,
    role_patch_hooks,
)
from emocircuit.circuit._attribution import (
    GradientMode,
    NeuronScore,
    attribution_score,
    attribution_scores,
    grad_R_wrt_key,
    key_path_patch_effect,
    live_key,
    neuron_delta,
    neuron_frame,
    residual_sensitivity,
    restoration_with_key,
    trace_neurons,
)
from emocircuit.circuit._lens import (
    LensReading,
    LogitLensReport,
    lens_distribution,
    logit_lens,
    logit_lens_layers,
    logit_lens_visual,
)
from emocircuit.circuit._restoration import (
    Head,
    HeadScore,
    RestorationContext,
    Target,
    emotional_intention,
    head_frame,
    latent_restoration,
    rank_heads,
    scored_heads,
    source_token,
    steering_vector,
    top_heads,
)
from emocircuit.circuit._saliency import FLOWS, SaliencyMap, flow_sums, saliency, saliency_of_input

__all__ = [
    "FLOWS",
    "GradientMode",
    "Head",
    "HeadIntersection",
    "HeadScore",
    "KeywordGrid",
    "KnockoutRecovery",
    "LensReading",
    "LogitLensReport",
    "NeuronScore",
    "PhasePatchResult",
    "RestorationContext",
    "SaliencyMap",
    "Target",
    "attribution_score",
    "attribution_scores",
    "decodes_containing",
    "emotional_intention",
    "flow_sums",
    "grad_R_wrt_key",
    "head_frame",
    "head_intersection",
    "key_path_patch_effect",
    "keyword_frequency_grid",
    "keyword_frequency_probe",
    "knockout",
    "knockout_hooks",
    "knockout_recovery",
    "latent_restoration",
    "lens_distribution",
    "live_key",
    "logit_lens",
    "logit_lens_layers",
    "logit_lens_visual",
    "neuron_delta",
    "neuron_frame",
    "phase_grid",
    "phase_patch",
    "random_heads",
    "random_neurons",
    "rank_heads",
    "residual_sensitivity",
    "restoration_with_key",
    "role_patch_hooks",
    "saliency",
    "saliency_of_input",
    "scored_heads",
    "source_token",
    "steering_vector",
    "top_heads",
    "trace_neurons",
]
