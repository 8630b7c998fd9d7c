"""Contrastive emotion directions, hit-rate filtered steering vectors and layer scans."""

from emocircuit.steering._pairs import ContrastivePair, pairs_for, split_pairs
from emocircuit.steering._steering import (
    INJECTION_POINT,
    Evaluator,
    LayerScan,
    LayerScanEntry,
    PairDirection,
    SteeringSet,
    aggregate_steering,
    export_directions,
    extract_pair_direction,
    inject_steering,
    layer_scan,
    load_steering,
    mean_direction,
    read_directions,
    save_steering,
    steering_hooks,
)

__all__ = [
    "INJECTION_POINT",
    "ContrastivePair",
    "Evaluator",
    "LayerScan",
    "LayerScanEntry",
    "PairDirection",
    "SteeringSet",
    "aggregate_steering",
    "export_directions",
    "extract_pair_direction",
    "inject_steering",
    "layer_scan",
    "load_steering",
    "mean_direction",
    "pairs_for",
    "read_directions",
    "save_steering",
    "split_pairs",
    "steering_hooks",
]
