"""Emotional Intention, the Latent Restoration metric and head ranking."""

import enum
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from emocircuit.exceptions import DegenerateContrastError, DegeneratePairsSkippedWarning
from emocircuit.model import (
    ActivationTrace,
    CaptureFilter,
    ForwardHooks,
    InputSequence,
    ModelBundle,
    forward,
    forward_from,
)
from emocircuit.numerics import cosine_sim
from emocircuit.steering import ContrastivePair, SteeringSet
from emocircuit.trace import CONTRAST_THRESHOLD, HeadOutput, PatchSpec, patch_hooks
from emocircuit.utils.sweep import sweep_map

Array = NDArray[np.float64]
Head = tuple[int, int]


class Target(enum.Enum):
    """Layer whose attention output the restoration metric reads."""

    CRITICAL_LAYER = "critical_layer"
    FINAL_LAYER = "final_layer"


def emotional_intention(attn_output: Array, steering: Array) -> float:
    """
    Cosine similarity between an attention output and a steering vector.

    Raises:
        ShapeError: If the dimensions differ.
        DegenerateVectorError: If either vector is zero.
    """
    return float(cosine_sim(np.asarray(attn_output, dtype=np.float64), np.asarray(steering, dtype=np.float64)))


def steering_vector(steering: SteeringSet | Array, layer: int) -> Array:
    if isinstance(steering, SteeringSet):
        return steering.vector(layer)
    return np.asarray(steering, dtype=np.float64)


@dataclass(frozen=True)
class RestorationContext:
    """
    Both traces of one pair plus the endpoints of the restoration metric.

    R(patch) = (I_patch - I(O-)) / (I(O+) - I(O-)), with every I read on the attention output
    of `critical_layer` at the Last input position.
    """

    bundle: ModelBundle
    x_plus: InputSequence
    x_minus: InputSequence
    critical_layer: int
    steering: Array
    trace_plus: ActivationTrace
    trace_minus: ActivationTrace
    intention_plus: float
    intention_minus: float
    pair_id: str | None = None

    @classmethod
    def build(
        cls,
        bundle: ModelBundle,
        x_plus: InputSequence,
        x_minus: InputSequence,
        critical_layer: int,
        steering: SteeringSet | Array,
        *,
        pair_id: str | None = None,
    ) -> "RestorationContext":
        """
        Raises:
            IndexError: If `critical_layer` is outside the model.
            DegenerateContrastError: If |I(O+) - I(O-)| is below 1e-9.
        """
        if not 0 <= critical_layer < bundle.config.n_layers:
            raise IndexError(f"critical layer {critical_layer} out of range [0, {bundle.config.n_layers})")
        vector = steering_vector(steering, critical_layer)
        capture = CaptureFilter.full()
        _, trace_plus = forward(bundle, x_plus, capture)
        _, trace_minus = forward(bundle, x_minus, capture)
        last = x_minus.last_position
        i_plus = emotional_intention(trace_plus.attn_out(critical_layer, last), vector)
        i_minus = emotional_intention(trace_minus.attn_out(critical_layer, last), vector)
        if abs(i_plus - i_minus) < CONTRAST_THRESHOLD:
            raise DegenerateContrastError(i_plus - i_minus, CONTRAST_THRESHOLD)
        return cls(bundle, x_plus, x_minus, critical_layer, vector, trace_plus, trace_minus, i_plus, i_minus, pair_id)

    @classmethod
    def for_pair(
        cls, bundle: ModelBundle, pair: ContrastivePair, critical_layer: int, steering: SteeringSet | Array
    ) -> "RestorationContext":
        return cls.build(bundle, pair.x_plus, pair.x_minus, critical_layer, steering, pair_id=pair.pair_id)

    @property
    def denominator(self) -> float:
        return self.intention_plus - self.intention_minus

    @property
    def last(self) -> int:
        return self.x_minus.last_position

    def residual_entering(self, layer: int, *, side: str = "minus") -> Array:
        """Residual of every position entering block `layer` in the recorded X- (or X+) run."""
        trace = self.trace_minus if side == "minus" else self.trace_plus
        if layer == 0:
            rows = trace.embedded_rows
            return np.stack([rows[p] for p in range(trace.length)])
        return trace.residual_matrix(layer - 1)

    def metric(self, intention: float) -> float:
        return (intention - self.intention_minus) / self.denominator

    def patched_intention(self, hooks: ForwardHooks, start_layer: int) -> float:
        """I on X- with `hooks` active, re-running only blocks `start_layer..critical_layer`."""
        result = forward_from(
            self.bundle,
            self.x_minus,
            self.residual_entering(start_layer),
            start_layer,
            hooks=hooks,
            stop_layer=self.critical_layer,
        )
        return emotional_intention(result.attn_out[self.last], self.steering)

    def head_patch_hooks(self, heads: Iterable[Head]) -> ForwardHooks:
        spec = PatchSpec(tuple(HeadOutput(layer, head) for layer, head in heads))
        return patch_hooks(spec, self.trace_plus, self.x_minus, self.bundle.config)

    def restoration(self, heads: Iterable[Head]) -> float:
        """R for the outputs of `heads` patched from X+ at every position."""
        selected = sorted(set(heads))
        if not selected:
            return 0.0
        _check_heads(self.bundle, selected, self.critical_layer)
        start = min(layer for layer, _ in selected)
        return self.metric(self.patched_intention(self.head_patch_hooks(selected), start))


def _check_heads(bundle: ModelBundle, heads: Iterable[Head], critical_layer: int) -> None:
    config = bundle.config
    for layer, head in heads:
        if not 0 <= head < config.n_heads:
            raise IndexError(f"head {head} out of range [0, {config.n_heads})")
        if not 0 <= layer <= critical_layer:
            raise IndexError(f"head layer {layer} must lie in [0, {critical_layer}]")


def latent_restoration(
    bundle: ModelBundle,
    x_plus: InputSequence,
    x_minus: InputSequence,
    head: Head | Iterable[Head],
    critical_layer: int,
    steering: SteeringSet | Array,
) -> float:
    """
    Latent Restoration score of one head, or of a set of heads patched jointly.

    The head output is taken from the X+ run at every position and written into the X- run;
    I is then read on the attention output of `critical_layer` at the Last position.

    Raises:
        DegenerateContrastError: If |I(O+) - I(O-)| is below 1e-9.
        IndexError: If a head lies outside the model or above `critical_layer`.
    """
    heads: list[Head]
    if isinstance(head, tuple) and len(head) == 2 and all(isinstance(v, (int, np.integer)) for v in head):
        heads = [(int(head[0]), int(head[1]))]
    else:
        heads = [(int(layer), int(h)) for layer, h in head]  # type: ignore[misc]
    context = RestorationContext.build(bundle, x_plus, x_minus, critical_layer, steering)
    return context.restoration(heads)


@dataclass(frozen=True)
class HeadScore:
    """
    Mean restoration score of one head over the non-degenerate pairs.

    `score` is None when every pair was degenerate; such heads sort last.
    """

    layer: int
    head: int
    score: float | None
    emotion: str
    target: Target
    n_pairs: int
    n_skipped: int

    @property
    def skipped(self) -> bool:
        return self.score is None

    @property
    def key(self) -> Head:
        return (self.layer, self.head)

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "head": self.head,
            "score": self.score,
            "emotion": self.emotion,
            "target": self.target.value,
            "n_pairs": self.n_pairs,
            "n_skipped": self.n_skipped,
        }


def _sort_key(score: HeadScore) -> tuple[int, float, int, int]:
    if score.score is None:
        return (1, 0.0, score.layer, score.head)
    return (0, -score.score, score.layer, score.head)


def scored_heads(bundle: ModelBundle, critical_layer: int, max_layer: int | None = None) -> list[Head]:
    """Heads strictly upstream of `critical_layer` (and below `max_layer` when given), in layer order."""
    limit = critical_layer if max_layer is None else min(critical_layer, max_layer)
    return [(layer, head) for layer in range(limit) for head in range(bundle.config.n_heads)]


def rank_heads(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    critical_layer: int,
    steering: SteeringSet | Array,
    target: Target | str = Target.CRITICAL_LAYER,
    *,
    max_layer: int | None = None,
    emotion: str | None = None,
    workers: int = 1,
    show_progress: bool = False,
) -> list[HeadScore]:
    """
    Rank upstream heads by mean Latent Restoration score.

    With `target` FINAL_LAYER the metric reads the last layer's attention output against the
    last layer's steering vector, and every head below it is scored. Degenerate pairs are
    skipped and counted; a warning reports how many. Scores are folded in pair order and
    sorted descending with (layer, head) breaking ties, so the ranking does not depend on
    `workers`.

    Raises:
        ValueError: If `pairs` is empty.
    """
    if not pairs:
        raise ValueError("rank_heads needs at least one pair")
    target = Target(target)
    layer = critical_layer if target is Target.CRITICAL_LAYER else bundle.config.n_layers - 1
    label = emotion or (steering.emotion if isinstance(steering, SteeringSet) else pairs[0].emotion)

    def build(pair: ContrastivePair) -> RestorationContext | None:
        try:
            return RestorationContext.for_pair(bundle, pair, layer, steering)
        except DegenerateContrastError:
            return None

    built = sweep_map(build, pairs, workers=workers, show_progress=show_progress, desc="Tracing pairs", unit=" pairs")
    contexts = [c for c in built if c is not None]
    skipped = len(pairs) - len(contexts)
    if skipped:
        warnings.warn(
            f"{skipped} of {len(pairs)} pairs skipped as degenerate (|I+ - I-| < {CONTRAST_THRESHOLD})",
            DegeneratePairsSkippedWarning,
            stacklevel=2,
        )

    def score(head: Head) -> HeadScore:
        if not contexts:
            return HeadScore(head[0], head[1], None, label, target, len(pairs), skipped)
        total = 0.0
        for context in contexts:
            total += context.restoration([head])
        return HeadScore(head[0], head[1], total / len(contexts), label, target, len(pairs), skipped)

    heads = scored_heads(bundle, layer, max_layer)
    scores = sweep_map(score, heads, workers=workers, show_progress=show_progress, desc="Ranking heads", unit=" heads")
    return sorted(scores, key=_sort_key)


def top_heads(scores: Sequence[HeadScore], k: int) -> list[Head]:
    """Keys of the first `k` non-skipped heads of a ranking."""
    return [s.key for s in scores if not s.skipped][:k]


def head_frame(scores: Sequence[HeadScore]) -> pd.DataFrame:
    return pd.DataFrame(
        [s.to_dict() for s in scores],
        columns=["layer", "head", "score", "emotion", "target", "n_pairs", "n_skipped"],
    )


def source_token(
    trace: ActivationTrace,
    head: Head,
    query_pos: int | None = None,
    *,
    query_rows: Sequence[int] | None = None,
) -> int:
    """
    Key position t* with the highest attention probability.

    With `query_pos` the argmax runs over that row. Without it the argmax runs over every
    cell of `query_rows` (default: all rows), ties going to the lowest row and then the
    lowest key position.

    Raises:
        IncompleteTraceError: If the trace holds no scores for `head`.
    """
    probs = trace.attention_probs(*head)
    if query_pos is not None:
        return int(np.argmax(probs[query_pos]))
    rows = list(range(probs.shape[0])) if query_rows is None else sorted(query_rows)
    block = probs[rows]
    return int(np.unravel_index(int(np.argmax(block)), block.shape)[1])
