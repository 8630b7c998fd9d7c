from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from emocircuit.eval import change_ratio
from emocircuit.exceptions import MetricInputError, NoValidPairsError, UndefinedRatioError
from emocircuit.model import (
    CaptureFilter,
    ForwardHooks,
    InputSequence,
    Intervention,
    ModelBundle,
    ResidualAddition,
    forward,
    greedy_decode,
)
from emocircuit.steering._pairs import ContrastivePair, pairs_for
from emocircuit.utils.binary import read_matrix_bundle, write_matrix_bundle
from emocircuit.utils.sweep import sweep_map

Array = NDArray[np.float64]

INJECTION_POINT = "post_block"


class Evaluator(Protocol):
    """Hit rate of a greedy continuation of `input` against `emotion`."""

    def __call__(
        self,
        bundle: ModelBundle,
        input: InputSequence,
        emotion: str,
        *,
        hooks: ForwardHooks | None = None,
        intervention: Intervention | None = None,
    ) -> float: ...


@dataclass(frozen=True)
class PairDirection:
    """Per-layer residual difference h+ - h- at the Last input position; `vectors` is (n_layers, d_model)."""

    pair_id: str
    emotion: str
    vectors: Array

    def __post_init__(self) -> None:
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)

    def at(self, layer: int) -> Array:
        return self.vectors[layer]


@dataclass(frozen=True)
class SteeringSet:
    """
    Global steering vectors of one emotion.

    Attributes:
        emotion: Emotion label.
        vectors: (n_layers, d_model); row l is the mean direction over the valid pairs.
        pair_ids: Valid pair ids U in ascending order.
        tau: Hit-rate threshold used to select U.
        hit_rates: H(X+, y) of every evaluated pair.
    """

    emotion: str
    vectors: Array
    pair_ids: tuple[str, ...]
    tau: float
    hit_rates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        vectors.flags.writeable = False
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "pair_ids", tuple(self.pair_ids))
        object.__setattr__(self, "hit_rates", dict(self.hit_rates))

    @property
    def n_valid(self) -> int:
        return len(self.pair_ids)

    def vector(self, layer: int) -> Array:
        return self.vectors[layer]

    def scaled(self, factor: float) -> "SteeringSet":
        return SteeringSet(self.emotion, self.vectors * factor, self.pair_ids, self.tau, self.hit_rates)

    def to_dict(self) -> dict[str, Any]:
        return {
            "emotion": self.emotion,
            "tau": self.tau,
            "n_valid": self.n_valid,
            "pair_ids": list(self.pair_ids),
            "hit_rates": dict(sorted(self.hit_rates.items())),
            "injection_point": INJECTION_POINT,
        }


def extract_pair_direction(bundle: ModelBundle, pair: ContrastivePair) -> PairDirection:
    """
    s_l = h+_l - h-_l at the Last input position, for every layer.

    Residuals are read after the full block, the same point where injections are added.

    Raises:
        PairError: If the pair's inputs do not share text and length.
    """
    pair.validate()
    last = pair.x_plus.last_position
    capture = CaptureFilter(residual=True, positions=frozenset({last}))
    _, trace_plus = forward(bundle, pair.x_plus, capture)
    _, trace_minus = forward(bundle, pair.x_minus, capture)
    layers = range(bundle.config.n_layers)
    vectors = np.stack([trace_plus.residual(layer, last) - trace_minus.residual(layer, last) for layer in layers])
    return PairDirection(pair.pair_id, pair.emotion, vectors)


def mean_direction(directions: Sequence[PairDirection]) -> Array:
    """Arithmetic mean folded left to right in the given order."""
    total = np.zeros_like(directions[0].vectors)
    for direction in directions:
        total = total + direction.vectors
    return total / len(directions)


def aggregate_steering(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    emotion: str,
    tau: float,
    evaluator: Evaluator,
    *,
    workers: int = 1,
    show_progress: bool = False,
) -> SteeringSet:
    """
    Hit-rate-filtered global steering vectors.

    The valid set U holds the pairs of `emotion` whose positive input decodes with H > tau.
    S_l is the mean of their directions in ascending pair-id order, so the result does not
    depend on `workers`.

    Raises:
        NoValidPairsError: If U is empty; the error carries every pair's hit rate.
    """
    group = pairs_for(pairs, emotion)
    scores = sweep_map(
        lambda pair: evaluator(bundle, pair.x_plus, pair.emotion),
        group,
        workers=workers,
        show_progress=show_progress,
        desc=f"Scoring {emotion} pairs",
        unit=" pairs",
    )
    hit_rates = {pair.pair_id: float(score) for pair, score in zip(group, scores, strict=True)}
    valid = [pair for pair in group if hit_rates[pair.pair_id] > tau]
    if not valid:
        raise NoValidPairsError(emotion, tau, hit_rates)
    directions = sweep_map(
        lambda pair: extract_pair_direction(bundle, pair),
        valid,
        workers=workers,
        show_progress=show_progress,
        desc=f"Extracting {emotion} directions",
        unit=" pairs",
    )
    return SteeringSet(emotion, mean_direction(directions), tuple(p.pair_id for p in valid), tau, hit_rates)


def steering_hooks(
    steering: SteeringSet, layer: int, alpha: float, positions: Iterable[int] | None = None
) -> ForwardHooks:
    """Hooks adding alpha * S_layer at the post-block residual of `layer`, decode steps included."""
    selected = None if positions is None else frozenset(int(p) for p in positions)
    return ForwardHooks(residual_add=(ResidualAddition(layer, steering.vector(layer), alpha, selected),))


def inject_steering(
    bundle: ModelBundle,
    input: InputSequence,
    steering: SteeringSet,
    layer: int,
    alpha: float,
    positions: Iterable[int] | None = None,
    *,
    max_new: int = 8,
) -> list[int]:
    """
    Greedy decode with h_l += alpha * S_l at `positions` (default: every position).

    The addition is applied during prefill and at every decode step.
    """
    if not 0 <= layer < bundle.config.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {bundle.config.n_layers})")
    return greedy_decode(bundle, input, max_new, hooks=steering_hooks(steering, layer, alpha, positions))


@dataclass(frozen=True)
class LayerScanEntry:
    layer: int
    hit_rate: float
    change_ratio: float


@dataclass(frozen=True)
class LayerScan:
    """Per-layer change ratio C, sorted by C descending with ties in ascending layer order."""

    emotion: str
    alpha: float
    baseline_hit_rate: float
    entries: tuple[LayerScanEntry, ...]
    injection_point: str = INJECTION_POINT

    @property
    def peak_layer(self) -> int:
        return self.entries[0].layer

    def by_layer(self) -> dict[int, LayerScanEntry]:
        return {entry.layer: entry for entry in self.entries}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"layer": e.layer, "hit_rate": e.hit_rate, "change_ratio": e.change_ratio} for e in self.entries],
            columns=["layer", "hit_rate", "change_ratio"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "emotion": self.emotion,
            "alpha": self.alpha,
            "baseline_hit_rate": self.baseline_hit_rate,
            "injection_point": self.injection_point,
            "peak_layer": self.peak_layer,
            "entries": [
                {"layer": e.layer, "hit_rate": e.hit_rate, "change_ratio": e.change_ratio} for e in self.entries
            ],
        }


def layer_scan(
    bundle: ModelBundle,
    steering: SteeringSet,
    probe_inputs: Sequence[InputSequence],
    alpha: float,
    evaluator: Evaluator,
    *,
    layers: Iterable[int] | None = None,
    workers: int = 1,
    show_progress: bool = False,
) -> LayerScan:
    """
    Inject alpha * S_l at each layer in turn and compare mean hit rate against the baseline.

    Raises:
        UndefinedRatioError: If the baseline hit rate over the probes is zero; the message
            lists the raw post-injection hit rates.
        MetricInputError: If `probe_inputs` is empty.
    """
    if not probe_inputs:
        raise MetricInputError("layer_scan needs at least one input")
    emotion = steering.emotion
    scanned = list(range(bundle.config.n_layers) if layers is None else layers)
    baseline_scores = sweep_map(lambda x: evaluator(bundle, x, emotion), probe_inputs, workers=workers)
    baseline = sum(baseline_scores) / len(baseline_scores)

    def scan(layer: int) -> float:
        hooks = steering_hooks(steering, layer, alpha)
        scores = [evaluator(bundle, x, emotion, hooks=hooks) for x in probe_inputs]
        return sum(scores) / len(scores)

    steered = sweep_map(
        scan, scanned, workers=workers, show_progress=show_progress, desc=f"Scanning {emotion}", unit=" layers"
    )
    if baseline == 0:
        raw = ", ".join(f"l{layer}={h:.4f}" for layer, h in zip(scanned, steered, strict=True))
        raise UndefinedRatioError(
            new_value=max(steered, default=0.0),
            message=f"baseline hit rate is zero; post-injection hit rates: {raw}",
        )
    entries = [
        LayerScanEntry(layer, h, change_ratio(baseline, h)) for layer, h in zip(scanned, steered, strict=True)
    ]
    entries.sort(key=lambda e: (-e.change_ratio, e.layer))
    return LayerScan(emotion, alpha, baseline, tuple(entries))


def export_directions(directions: Sequence[PairDirection], layer: int, path: str | Path) -> Path:
    """
    Write the layer-`layer` rows of `directions` as an EMM1 matrix named `directions`.

    The header metadata lists the pair ids and emotion labels in row order.
    """
    if not directions:
        raise ValueError("export_directions needs at least one direction")
    matrix = np.stack([d.at(layer) for d in directions])
    meta = {
        "layer": layer,
        "pair_ids": [d.pair_id for d in directions],
        "emotions": [d.emotion for d in directions],
    }
    return write_matrix_bundle(path, {"directions": matrix}, meta)


def read_directions(path: str | Path) -> tuple[Array, dict[str, Any]]:
    arrays, meta = read_matrix_bundle(path)
    return arrays["directions"], meta


def save_steering(steering: SteeringSet, path: str | Path) -> Path:
    return write_matrix_bundle(path, {"vectors": steering.vectors}, steering.to_dict())


def load_steering(path: str | Path) -> SteeringSet:
    arrays, meta = read_matrix_bundle(path)
    return SteeringSet(
        emotion=str(meta["emotion"]),
        vectors=arrays["vectors"],
        pair_ids=tuple(meta["pair_ids"]),
        tau=float(meta["tau"]),
        hit_rates={str(k): float(v) for k, v in meta.get("hit_rates", {}).items()},
    )
