"""
Attribution patching from a ranked head back to upstream MLP neurons.

The gradient of R with respect to the key of head (l', h) at the source token t* is taken in
the value-restoration context: X- runs with the head's value vectors copied from X+, while its
queries and keys are computed live, so the key at t* sets how much restored content the head
reads into the Last position.
"""

import enum
import warnings
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from emocircuit.circuit._restoration import Head, RestorationContext, source_token, steering_vector
from emocircuit.exceptions import AblationVariantWarning, DegenerateContrastError, DegeneratePairsSkippedWarning
from emocircuit.model import ForwardHooks, ModelBundle, TokenRole, forward_from
from emocircuit.numerics import (
    AdjointTape,
    add,
    backward,
    cosine_sim,
    dot,
    layer_norm,
    matmul,
    multiply,
    replace_row,
    take_row,
)
from emocircuit.steering import ContrastivePair, SteeringSet
from emocircuit.utils.sweep import sweep_map

Array = NDArray[np.float64]
Neuron = tuple[int, int]


class GradientMode(enum.Enum):
    """How dR/dk is mapped back onto an upstream neuron."""

    EXACT = "exact"
    TRUNCATED = "truncated"


def _value_restoration(context: RestorationContext, head: Head) -> dict[tuple[int, int, int], Array]:
    layer, h = head
    return {(layer, h, p): context.trace_plus.head_value(layer, h, p) for p in range(context.x_minus.length)}


def _key_intention(
    context: RestorationContext, head: Head, t_star: int, key: Array, tape: AdjointTape | None
) -> Array:
    """
    I on the critical layer in the value-restoration context, with the key of `head` at
    `t_star` replaced by `key`. When `tape` is given, `key` must be watched on it.
    """
    layer, h = head
    config = context.bundle.config
    head_mask = np.zeros((config.n_heads, 1, 1))
    head_mask[h] = 1.0

    def swap_key(k: Array, positions: tuple[int, ...]) -> Array:
        row = positions.index(t_star)
        keep_cells = np.ones_like(k)
        keep_cells[h, row] = 0.0
        placed = multiply(replace_row(np.zeros_like(k), row, key, tape=tape), head_mask, tape=tape)
        return add(multiply(k, keep_cells, tape=tape), placed, tape=tape)

    hooks = ForwardHooks(value_set=_value_restoration(context, head), taps={("key", layer): swap_key}, tape=tape)
    result = forward_from(
        context.bundle,
        context.x_minus,
        context.residual_entering(layer),
        layer,
        hooks=hooks,
        stop_layer=context.critical_layer,
    )
    row = take_row(result.attn_out, context.last, tape=tape)
    return cosine_sim(row, context.steering, tape=tape)


def live_key(context: RestorationContext, head: Head, t_star: int) -> Array:
    """Key of `head` at `t_star` in the X- run."""
    layer, h = head
    weights = context.bundle.weights.layers[layer]
    residual = context.residual_entering(layer)[t_star : t_star + 1]
    keys = matmul(layer_norm(residual, weights.ln1_gain, weights.ln1_bias), weights.w_k)[0]
    return keys[weights.head_slice(context.bundle.config, h)]


def restoration_with_key(context: RestorationContext, head: Head, t_star: int, key: Array) -> float:
    """R in the value-restoration context for a given key of `head` at `t_star`."""
    return context.metric(float(_key_intention(context, head, t_star, np.asarray(key, dtype=np.float64), None)))


def grad_R_wrt_key(context: RestorationContext, head: Head, t_star: int) -> Array:
    """
    dR/dk for the key of `head` at position `t_star`, by reverse mode through blocks
    l'..critical_layer.

    Raises:
        IndexError: If the head is not upstream of the critical layer or `t_star` is out of range.
        TapeError: If an adjoint fails.
    """
    layer, h = head
    config = context.bundle.config
    if not 0 <= h < config.n_heads or not 0 <= layer <= context.critical_layer:
        raise IndexError(f"head {head} is not at or below critical layer {context.critical_layer}")
    if not 0 <= t_star < context.x_minus.length:
        raise IndexError(f"source position {t_star} out of range [0, {context.x_minus.length})")
    tape = AdjointTape()
    key = tape.watch(live_key(context, head, t_star).copy())
    intention = _key_intention(context, head, t_star, key, tape)
    return backward(tape, intention).wrt(key) / context.denominator


def neuron_delta(context: RestorationContext, layer: int, t_star: int) -> Array:
    """A+ - A- of every neuron of `layer` at `t_star`."""
    return context.trace_plus.neuron(layer, t_star) - context.trace_minus.neuron(layer, t_star)


def residual_sensitivity(
    context: RestorationContext, neuron_layer: int, head: Head, t_star: int, grad_k: Array
) -> Array:
    """
    Gradient of grad_k · k with respect to the post-block residual of `neuron_layer` at `t_star`.

    Covers every block between the neuron and the head's key projection, layer norms included.
    """
    layer, h = head
    config = context.bundle.config
    tape = AdjointTape()
    residual = context.residual_entering(neuron_layer + 1)
    row = tape.watch(residual[t_star].copy())
    start = replace_row(residual, t_star, row, tape=tape)
    probe = np.zeros((config.n_heads, config.d_head))
    probe[h] = grad_k
    seen: list[Array] = []

    def read_key(k: Array, positions: tuple[int, ...]) -> Array:
        seen.append(dot(take_row(k, positions.index(t_star), tape=tape), probe, tape=tape))
        return k

    hooks = ForwardHooks(taps={("key", layer): read_key}, tape=tape)
    forward_from(context.bundle, context.x_minus, start, neuron_layer + 1, hooks=hooks, stop_layer=layer)
    if not tape.is_tracked(seen[0]):
        return np.zeros(config.d_model)
    return backward(tape, seen[0]).wrt(row)


def attribution_scores(
    context: RestorationContext,
    neuron_layer: int,
    head: Head,
    t_star: int,
    grad_k: Array,
    mode: GradientMode | str = GradientMode.EXACT,
) -> Array:
    """
    G for every neuron of `neuron_layer`: dA_u times the first-order effect of a unit change in
    A_u on R through the key of `head` at `t_star`.

    In EXACT mode the effect is W_down[u] · (dk/dh)^T grad_k with the full Jacobian from the
    residual to the key. In TRUNCATED mode it is W_down[u] · W_K,h grad_k.

    Raises:
        ValueError: If the neuron layer is not strictly below the head layer.
        IncompleteTraceError: If a trace lacks the neuron activations at `t_star`.
    """
    mode = GradientMode(mode)
    layer, h = head
    if not 0 <= neuron_layer < layer:
        raise ValueError(f"neuron layer {neuron_layer} must be below head layer {layer}")
    delta = neuron_delta(context, neuron_layer, t_star)
    w_down = context.bundle.weights.layers[neuron_layer].w_down
    if mode is GradientMode.TRUNCATED:
        weights = context.bundle.weights.layers[layer]
        direction = weights.w_k[:, weights.head_slice(context.bundle.config, h)] @ grad_k
    else:
        direction = residual_sensitivity(context, neuron_layer, head, t_star, grad_k)
    return delta * (w_down @ direction)


def attribution_score(
    context: RestorationContext,
    neuron: Neuron,
    head: Head,
    t_star: int,
    grad_k: Array,
    mode: GradientMode | str = GradientMode.EXACT,
) -> float:
    """G of a single neuron (layer, u); see `attribution_scores`."""
    neuron_layer, u = neuron
    if not 0 <= u < context.bundle.config.d_mlp:
        raise IndexError(f"neuron {u} out of range [0, {context.bundle.config.d_mlp})")
    return float(attribution_scores(context, neuron_layer, head, t_star, grad_k, mode)[u])


def key_path_patch_effect(
    context: RestorationContext, neuron: Neuron, head: Head, t_star: int, scale: float = 1.0
) -> float:
    """
    Exact change in R from moving one neuron at `t_star` by `scale` times its A+ - A- difference.

    The moved activation is propagated through the X- run up to the key of `head` at `t_star`;
    that key alone is swapped into the value-restoration context and R is re-evaluated.
    """
    neuron_layer, u = neuron
    layer, h = head
    a_minus = context.trace_minus.neuron(neuron_layer, t_star)[u]
    moved = a_minus + scale * neuron_delta(context, neuron_layer, t_star)[u]
    seen: list[Array] = []

    def read_key(k: Array, positions: tuple[int, ...]) -> Array:
        seen.append(k[h, positions.index(t_star)].copy())
        return k

    hooks = ForwardHooks(neuron_set={(neuron_layer, t_star, u): float(moved)}, taps={("key", layer): read_key})
    start = context.residual_entering(neuron_layer)
    forward_from(context.bundle, context.x_minus, start, neuron_layer, hooks=hooks, stop_layer=layer)
    before = restoration_with_key(context, head, t_star, live_key(context, head, t_star))
    after = restoration_with_key(context, head, t_star, seen[0])
    return after - before


@dataclass(frozen=True)
class NeuronScore:
    """Attribution score of one upstream neuron for one ranked head."""

    layer: int
    neuron: int
    score: float
    head: Head
    source_token: int
    n_pairs: int = 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer": self.layer,
            "neuron": self.neuron,
            "score": self.score,
            "head_layer": self.head[0],
            "head": self.head[1],
            "source_token": self.source_token,
            "n_pairs": self.n_pairs,
        }


def neuron_frame(scores: Sequence[NeuronScore]) -> pd.DataFrame:
    return pd.DataFrame(
        [s.to_dict() for s in scores],
        columns=["layer", "neuron", "score", "head_layer", "head", "source_token", "n_pairs"],
    )


def _pair_scores(context: RestorationContext, head: Head, mode: GradientMode) -> tuple[int, Array]:
    """t* and the (head_layer, d_mlp) matrix of G over every upstream layer for one pair."""
    query_rows = context.x_plus.positions(TokenRole.QUERY) or (context.last,)
    t_star = source_token(context.trace_plus, head, query_rows=query_rows)
    grad_k = grad_R_wrt_key(context, head, t_star)
    rows = [attribution_scores(context, layer, head, t_star, grad_k, mode) for layer in range(head[0])]
    return t_star, np.stack(rows) if rows else np.zeros((0, context.bundle.config.d_mlp))


def trace_neurons(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    heads: Sequence[Head],
    k_neuron: int,
    critical_layer: int,
    steering: SteeringSet | Array,
    *,
    mode: GradientMode | str = GradientMode.EXACT,
    max_pairs: int | None = None,
    workers: int = 1,
    show_progress: bool = False,
) -> dict[Head, list[NeuronScore]]:
    """
    Top-`k_neuron` upstream neurons per head by |G|.

    For each pair, t* is the source token of the head in the X+ trace, dR/dk is computed once,
    and G is evaluated for every neuron below the head. G is averaged over the first
    `max_pairs` non-degenerate pairs in the order given. Ties in |G| go to the lower
    (layer, neuron).

    Returns:
        Scores per head; the reported source token is the one of the first pair used.
    """
    mode = GradientMode(mode)
    if mode is GradientMode.TRUNCATED:
        warnings.warn(
            "truncated attribution drops the layer norm and intermediate blocks from the key path",
            AblationVariantWarning,
            stacklevel=2,
        )
    if k_neuron <= 0:
        return {head: [] for head in heads}
    vector = steering_vector(steering, critical_layer)
    contexts: list[RestorationContext] = []
    skipped = 0
    for pair in pairs:
        if max_pairs is not None and len(contexts) >= max_pairs:
            break
        try:
            contexts.append(RestorationContext.for_pair(bundle, pair, critical_layer, vector))
        except DegenerateContrastError:
            skipped += 1
    if skipped:
        warnings.warn(f"{skipped} degenerate pairs skipped", DegeneratePairsSkippedWarning, stacklevel=2)

    def trace_head(head: Head) -> list[NeuronScore]:
        if not contexts or head[0] == 0:
            return []
        total: Array | None = None
        first_t_star = -1
        for context in contexts:
            t_star, scores = _pair_scores(context, head, mode)
            if total is None:
                total, first_t_star = scores, t_star
            else:
                total = total + scores
        assert total is not None
        mean = total / len(contexts)
        order = sorted(np.ndindex(*mean.shape), key=lambda cell: (-abs(mean[cell]), cell[0], cell[1]))
        return [
            NeuronScore(int(layer), int(u), float(mean[layer, u]), head, first_t_star, len(contexts))
            for layer, u in order[:k_neuron]
        ]

    traced = sweep_map(
        trace_head, heads, workers=workers, show_progress=show_progress, desc="Tracing neurons", unit=" heads"
    )
    return dict(zip(heads, traced, strict=True))
