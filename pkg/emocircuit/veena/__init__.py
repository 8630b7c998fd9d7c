"""VEENA: flow-aware attention scaling and emotional neuron augmentation at inference time."""

from emocircuit.veena._intervention import (
    InterventionSpec,
    ProvenanceRecord,
    ReplaySession,
    VeenaResult,
    VeenaSession,
    VeeMode,
    apply_ena,
    apply_vee,
    load_spec,
    neuron_multiplier,
    read_provenance,
    replay_veena,
    run_veena,
    save_spec,
    vee_mask,
    write_provenance,
)
from emocircuit.veena._selection import (
    HEAD_SCALES,
    NEURON_SCALES,
    SelectionAblation,
    SelectionEntry,
    SideEffectAudit,
    aggregate_critical_sets,
    mean_hit_rate,
    selection_ablation,
    side_effect_audit,
)

__all__ = [
    "HEAD_SCALES",
    "NEURON_SCALES",
    "InterventionSpec",
    "ProvenanceRecord",
    "ReplaySession",
    "SelectionAblation",
    "SelectionEntry",
    "SideEffectAudit",
    "VeeMode",
    "VeenaResult",
    "VeenaSession",
    "aggregate_critical_sets",
    "apply_ena",
    "apply_vee",
    "load_spec",
    "mean_hit_rate",
    "neuron_multiplier",
    "read_provenance",
    "replay_veena",
    "run_veena",
    "save_spec",
    "selection_ablation",
    "side_effect_audit",
    "vee_mask",
    "write_provenance",
]
