from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from emocircuit.eval import Lexicon
from emocircuit.exceptions import ShapeError
from emocircuit.model import ActivationTrace, ModelBundle, unembed
from emocircuit.numerics import entropy, softmax_rows
from emocircuit.steering import SteeringSet

Array = NDArray[np.float64]


@dataclass(frozen=True)
class LensReading:
    """
    Vocabulary distribution of one residual-space vector.

    Attributes:
        top: The `k` most probable (token, probability) pairs; ties go to the lower id.
        entropy: Entropy of the full distribution in nats.
        emotion_mass: Probability on the emotion lexicon, when one was given.
        layer: Layer the vector belongs to, if any.
        position: Sequence position the vector was read at, if any.
    """

    top: tuple[tuple[int, float], ...]
    entropy: float
    emotion_mass: float | None = None
    layer: int | None = None
    position: int | None = None

    @property
    def top_token(self) -> int:
        return self.top[0][0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "position": self.position,
            "entropy": self.entropy,
            "emotion_mass": self.emotion_mass,
            "top": [{"token": token, "probability": p} for token, p in self.top],
        }


@dataclass(frozen=True)
class LogitLensReport:
    """Lens readings of steering vectors per layer, or of visual residuals per (layer, position)."""

    readings: tuple[LensReading, ...]

    def at(self, layer: int, position: int | None = None) -> LensReading:
        for reading in self.readings:
            if reading.layer == layer and reading.position == position:
                return reading
        raise KeyError((layer, position))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "layer": r.layer,
                    "position": r.position,
                    "entropy": r.entropy,
                    "emotion_mass": r.emotion_mass,
                    "top_token": r.top_token,
                    "top_probability": r.top[0][1],
                }
                for r in self.readings
            ],
            columns=["layer", "position", "entropy", "emotion_mass", "top_token", "top_probability"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {"readings": [r.to_dict() for r in self.readings]}


def lens_distribution(bundle: ModelBundle, vector: Array) -> Array:
    """softmax(U · LN_final(v)) over the vocabulary."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (bundle.config.d_model,):
        raise ShapeError("logit_lens", vector.shape, (bundle.config.d_model,))
    return softmax_rows(unembed(bundle, vector[None, :]))[0]


def logit_lens(
    bundle: ModelBundle,
    vector: Array | SteeringSet,
    k: int = 10,
    *,
    layer: int | None = None,
    lexicon: Lexicon | None = None,
    position: int | None = None,
) -> LensReading:
    """
    Project a residual-space vector onto the vocabulary through the final norm and unembedding.

    A SteeringSet is read at `layer`.
    """
    if isinstance(vector, SteeringSet):
        if layer is None:
            raise ValueError("layer is required when reading a steering set")
        vector = vector.vector(layer)
    probs = lens_distribution(bundle, vector)
    order = np.argsort(-probs, kind="stable")[: max(k, 1)]
    mass = None
    if lexicon is not None:
        mass = float(np.sum(probs[sorted(lexicon.all_tokens())]))
    return LensReading(
        top=tuple((int(t), float(probs[t])) for t in order),
        entropy=entropy(probs),
        emotion_mass=mass,
        layer=layer,
        position=position,
    )


def logit_lens_layers(
    bundle: ModelBundle, steering: SteeringSet, k: int = 10, *, lexicon: Lexicon | None = None
) -> LogitLensReport:
    """The lens applied to S_l at every layer."""
    return LogitLensReport(
        tuple(logit_lens(bundle, steering, k, layer=layer, lexicon=lexicon) for layer in range(bundle.config.n_layers))
    )


def logit_lens_visual(
    bundle: ModelBundle,
    trace: ActivationTrace,
    positions: Sequence[int],
    lexicon: Lexicon,
    k: int = 5,
    *,
    layers: Iterable[int] | None = None,
) -> LogitLensReport:
    """
    Semantic entropy and emotion probability of visual residuals, per layer and position.

    Raises:
        IncompleteTraceError: If the trace lacks a residual cell.
    """
    scanned = range(bundle.config.n_layers) if layers is None else layers
    readings = [
        logit_lens(bundle, trace.residual(layer, position), k, layer=layer, lexicon=lexicon, position=position)
        for layer in scanned
        for position in positions
    ]
    return LogitLensReport(tuple(readings))
