"""Planted-circuit construction, synthetic datasets, the end-to-end pipeline and its reports."""

from emocircuit.config import RunConfig
from emocircuit.harness._data import (
    PROBE_HIGH,
    PROBE_LOW,
    Dataset,
    Probe,
    ProbeSet,
    gen_dataset,
    gen_probe_set,
    load_dataset,
    neutral_inputs,
    save_dataset,
)
from emocircuit.harness._pipeline import Pipeline, run_pipeline
from emocircuit.harness._plant import (
    PlantedModel,
    PlantGates,
    PlantSet,
    PlantSpec,
    Wiring,
    build_planted_model,
    default_plants,
    gen_pairs,
    measure_gates,
    neutral_visual,
    plant_layers,
    wire_model,
)
from emocircuit.harness._report import emit_report, read_report, write_table

__all__ = [
    "PROBE_HIGH",
    "PROBE_LOW",
    "Dataset",
    "Pipeline",
    "PlantGates",
    "PlantSet",
    "PlantSpec",
    "PlantedModel",
    "Probe",
    "ProbeSet",
    "RunConfig",
    "Wiring",
    "build_planted_model",
    "default_plants",
    "emit_report",
    "gen_dataset",
    "gen_pairs",
    "gen_probe_set",
    "load_dataset",
    "measure_gates",
    "neutral_inputs",
    "neutral_visual",
    "plant_layers",
    "read_report",
    "run_pipeline",
    "save_dataset",
    "wire_model",
    "write_table",
]
