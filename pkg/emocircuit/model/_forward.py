"""
Forward pass, resumable partial passes and cached greedy decoding.

Each block is pre-norm:

    x = x + W_O · attention(LN1(x))
    x = x + W_down · gelu(W_up · LN2(x))

with causal attention over the visual prefix and the text. Scores are q·kᵀ scaled by
1/sqrt(d_head). The residual recorded for a layer is the value after the full block.
"""

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import SequenceLengthError
from emocircuit.model._capture import ActivationTrace, CaptureFilter
from emocircuit.model._config import InputSequence, ModelConfig, TokenRole
from emocircuit.model._hooks import ForwardHooks, Intervention, LayerHooks, ResidualAddition
from emocircuit.model._weights import ModelBundle
from emocircuit.numerics import (
    AdjointTape,
    add,
    causal_fill,
    gelu,
    layer_norm,
    matmul,
    multiply,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

Array = NDArray[np.float64]


class _TraceBuilder:
    def __init__(self, config: ModelConfig, capture: CaptureFilter) -> None:
        self.config = config
        self.capture = capture
        self.cells: dict[str, dict[tuple[int, ...], Array]] = {}
        self.embedded: dict[int, Array] = {}

    def wants(self, flag: bool, layer: int) -> bool:
        return flag and self.capture.wants_layer(layer)

    def put_rows(self, family: str, layer: int, positions: Sequence[int], rows: Array) -> None:
        store = self.cells.setdefault(family, {})
        for index, position in enumerate(positions):
            if self.capture.wants_position(position):
                store[(layer, position)] = rows[index].copy()

    def put_heads(self, family: str, layer: int, positions: Sequence[int], per_head: Array) -> None:
        store = self.cells.setdefault(family, {})
        for head in range(per_head.shape[0]):
            for index, position in enumerate(positions):
                if self.capture.wants_position(position):
                    store[(layer, head, position)] = per_head[head, index].copy()

    def put_embedded(self, positions: Sequence[int], rows: Array) -> None:
        if not self.capture.residual:
            return
        for index, position in enumerate(positions):
            if self.capture.wants_position(position):
                self.embedded[position] = rows[index].copy()

    def freeze(self, fingerprint: str, length: int) -> ActivationTrace:
        return ActivationTrace(self.config, fingerprint, length, self.cells, self.embedded)


@dataclass
class DecodeState:
    """KV cache of one decode: per layer, the (n_heads, t, d_head) keys and values seen so far."""

    keys: list[Array | None]
    values: list[Array | None]
    roles: list[TokenRole]

    @classmethod
    def empty(cls, config: ModelConfig, roles: Sequence[TokenRole]) -> "DecodeState":
        return cls(keys=[None] * config.n_layers, values=[None] * config.n_layers, roles=list(roles))

    @property
    def length(self) -> int:
        return len(self.roles)


@dataclass(frozen=True)
class PartialResult:
    """
    Outcome of a forward pass over a range of layers.

    Attributes:
        residual: Residual of every position after the last layer run; when the pass stopped
            after a layer's attention, this is the residual before that layer's MLP.
        attn_out: Attention output (after W_O) of the last layer run.
        logits: Logits per position when the pass ran to the end, else None.
        trace: Activations recorded during the pass.
    """

    residual: Array
    attn_out: Array
    logits: Array | None
    trace: ActivationTrace


@dataclass(frozen=True)
class DecodeResult:
    tokens: list[int]
    step_logits: list[Array] = field(repr=False)


def _override_rows(x: Array, rows: Mapping[int, Array], tape: AdjointTape | None) -> Array:
    if not rows:
        return x
    keep = np.ones_like(x)
    fill = np.zeros_like(x)
    for row, value in rows.items():
        keep[row] = 0.0
        fill[row] = value
    return add(multiply(x, keep, tape=tape), fill, tape=tape)


def _override_heads(
    x: Array, cells: Mapping[tuple[int, int], Array], zero: frozenset[int], tape: AdjointTape | None
) -> Array:
    if not cells and not zero:
        return x
    keep = np.ones_like(x)
    fill = np.zeros_like(x)
    for head in zero:
        keep[head] = 0.0
    for (head, row), value in cells.items():
        keep[head, row] = 0.0
        fill[head, row] = value
    return add(multiply(x, keep, tape=tape), fill, tape=tape)


def _override_cells(x: Array, cells: Mapping[tuple[int, int], float], tape: AdjointTape | None) -> Array:
    if not cells:
        return x
    keep = np.ones_like(x)
    fill = np.zeros_like(x)
    for (row, column), value in cells.items():
        keep[row, column] = 0.0
        fill[row, column] = value
    return add(multiply(x, keep, tape=tape), fill, tape=tape)


def _residual_additions(additions: Sequence[ResidualAddition], positions: Sequence[int], width: int) -> Array | None:
    groups: dict[tuple[bytes, frozenset[int] | None], tuple[Array, float]] = {}
    for addition in additions:
        key = (addition.vector.tobytes(), addition.positions)
        vector, alpha = groups.get(key, (addition.vector, 0.0))
        groups[key] = (vector, alpha + addition.alpha)
    total: Array | None = None
    for (_, selected), (vector, alpha) in groups.items():
        if alpha == 0.0:
            continue
        rows = [i for i, p in enumerate(positions) if selected is None or p in selected]
        if not rows:
            continue
        if total is None:
            total = np.zeros((len(positions), width))
        total[rows] += alpha * vector
    return total


class _Pass:
    """One run of a contiguous range of blocks over a set of new rows."""

    def __init__(
        self,
        bundle: ModelBundle,
        hooks: ForwardHooks,
        positions: Sequence[int],
        roles: Sequence[TokenRole],
        step: int,
        cache: DecodeState | None,
        builder: _TraceBuilder | None,
    ) -> None:
        self.bundle = bundle
        self.config = bundle.config
        self.hooks = hooks
        self.tape = hooks.tape
        self.positions = tuple(int(p) for p in positions)
        self.rows = {p: i for i, p in enumerate(self.positions)}
        self.roles = tuple(roles)
        self.step = step
        self.cache = cache
        self.builder = builder
        self.allowed = np.arange(len(self.roles))[None, :] <= np.asarray(self.positions)[:, None]

    def _tap(self, hooks: LayerHooks, point: str, value: Array) -> Array:
        fn = hooks.taps.get(point)
        return value if fn is None else fn(value, self.positions)

    def _split_heads(self, x: Array) -> Array:
        m = len(self.positions)
        shaped = reshape(x, (m, self.config.n_heads, self.config.d_head), tape=self.tape)
        return transpose(shaped, (1, 0, 2), tape=self.tape)

    def _local(self, cells: Mapping[tuple[int, int], Array]) -> dict[tuple[int, int], Array]:
        return {(h, self.rows[p]): v for (h, p), v in cells.items() if p in self.rows}

    def run(self, x: Array, start_layer: int, stop_layer: int | None) -> tuple[Array, Array]:
        attn_out = np.zeros_like(x)
        last = self.config.n_layers - 1 if stop_layer is None else stop_layer
        for layer in range(start_layer, last + 1):
            x, attn_out = self.block(layer, x, stop=stop_layer == layer)
        return x, attn_out

    def block(self, layer: int, x: Array, *, stop: bool = False) -> tuple[Array, Array]:
        config, tape, builder = self.config, self.tape, self.builder
        weights = self.bundle.weights.layers[layer]
        hooks = self.hooks.layer_view(layer)
        m = len(self.positions)

        x = self._tap(hooks, "resid_pre", x)
        normed = layer_norm(x, weights.ln1_gain, weights.ln1_bias, tape=tape)
        q = self._split_heads(matmul(normed, weights.w_q, tape=tape))
        k = self._split_heads(matmul(normed, weights.w_k, tape=tape))
        v = self._split_heads(matmul(normed, weights.w_v, tape=tape))
        k = self._tap(hooks, "key", _override_heads(k, self._local(hooks.key_set), frozenset(), tape))
        v = self._tap(hooks, "value", _override_heads(v, self._local(hooks.value_set), frozenset(), tape))

        k_all, v_all = k, v
        if self.cache is not None:
            if self.cache.keys[layer] is not None:
                k_all = np.concatenate([self.cache.keys[layer], k], axis=1)
                v_all = np.concatenate([self.cache.values[layer], v], axis=1)
            self.cache.keys[layer], self.cache.values[layer] = k_all, v_all

        scores = scale(
            matmul(q, transpose(k_all, (0, 2, 1), tape=tape), tape=tape),
            1.0 / math.sqrt(config.d_head),
            tape=tape,
        )
        if builder is not None and builder.wants(builder.capture.scores, layer) and m == len(self.roles):
            for head in range(config.n_heads):
                builder.cells.setdefault("scores", {})[(layer, head)] = scores[head].copy()

        session = self.hooks.intervention
        if session is not None:
            multiplier = session.attention_multiplier(layer, self.step, self.positions, self.roles, config.n_heads)
            if multiplier is not None:
                if session.additive:
                    scores = add(scores, np.log(multiplier), tape=tape)
                else:
                    scores = multiply(scores, multiplier, tape=tape)

        probs = softmax_rows(causal_fill(scores, self.allowed[None, :, :], tape=tape), tape=tape)
        probs = self._tap(hooks, "probs", probs)
        head_out = matmul(probs, v_all, tape=tape)
        head_out = _override_heads(head_out, self._local(hooks.head_set), hooks.head_zero, tape)
        if builder is not None:
            if builder.wants(builder.capture.head_output, layer):
                builder.put_heads("head_out", layer, self.positions, head_out)
            if builder.wants(builder.capture.head_value, layer):
                builder.put_heads("head_value", layer, self.positions, v)

        merged = reshape(transpose(head_out, (1, 0, 2), tape=tape), (m, config.d_model), tape=tape)
        attn_out = self._tap(hooks, "attn_out", matmul(merged, weights.w_o, tape=tape))
        if builder is not None and builder.wants(builder.capture.attn_out, layer):
            builder.put_rows("attn_out", layer, self.positions, attn_out)
        x = add(x, attn_out, tape=tape)
        if stop:
            return x, attn_out

        normed = layer_norm(x, weights.ln2_gain, weights.ln2_bias, tape=tape)
        acts = gelu(matmul(normed, weights.w_up, tape=tape), tape=tape)
        if session is not None:
            neuron_scale = session.neuron_multiplier(layer, self.step, self.positions)
            if neuron_scale is not None:
                acts = multiply(acts, neuron_scale, tape=tape)
        local_neurons = {(self.rows[p], u): val for (p, u), val in hooks.neuron_set.items() if p in self.rows}
        acts = self._tap(hooks, "neuron", _override_cells(acts, local_neurons, tape))
        if builder is not None and builder.wants(builder.capture.neuron, layer):
            builder.put_rows("neuron", layer, self.positions, acts)
        x = add(x, matmul(acts, weights.w_down, tape=tape), tape=tape)

        x = _override_rows(x, {self.rows[p]: v for p, v in hooks.residual_set.items() if p in self.rows}, tape)
        extra = _residual_additions(hooks.residual_add, self.positions, config.d_model)
        if extra is not None:
            x = add(x, extra, tape=tape)
        x = self._tap(hooks, "resid_post", x)
        if builder is not None and builder.wants(builder.capture.residual, layer):
            builder.put_rows("residual", layer, self.positions, x)
        return x, attn_out


def embed(bundle: ModelBundle, input: InputSequence) -> Array:
    """
    Residual rows entering block 0.

    Visual rows are the supplied embeddings, unchanged. Text row i is the token embedding plus
    the positional embedding of absolute position i.
    """
    input.validate(bundle.config)
    weights = bundle.weights
    start = input.n_visual
    text = [weights.token_embedding[t] + weights.pos_embedding[start + i] for i, t in enumerate(input.text_token_ids)]
    rows = [np.asarray(input.visual_embeddings, dtype=np.float64), np.asarray(text).reshape(-1, bundle.config.d_model)]
    return np.concatenate(rows, axis=0)


def embed_token(bundle: ModelBundle, token_id: int, position: int) -> Array:
    config = bundle.config
    if not 0 <= token_id < config.vocab_size:
        raise IndexError(f"token id {token_id} out of range [0, {config.vocab_size})")
    if not 0 <= position < config.max_seq:
        raise SequenceLengthError(position + 1, config.max_seq)
    return bundle.weights.token_embedding[token_id] + bundle.weights.pos_embedding[position]


def unembed(bundle: ModelBundle, residual: Array, *, tape: AdjointTape | None = None) -> Array:
    """Logits of residual rows: LN_final(residual) · U."""
    weights = bundle.weights
    normed = layer_norm(residual, weights.ln_final_gain, weights.ln_final_bias, tape=tape)
    return matmul(np.atleast_2d(normed), weights.unembedding, tape=tape)


def _run_range(
    bundle: ModelBundle,
    input: InputSequence,
    residual_in: Array,
    start_layer: int,
    stop_layer: int | None,
    hooks: ForwardHooks,
    builder: _TraceBuilder | None,
) -> PartialResult:
    config = bundle.config
    if not 0 <= start_layer < config.n_layers:
        raise IndexError(f"start_layer {start_layer} out of range [0, {config.n_layers})")
    if stop_layer is not None and not start_layer <= stop_layer < config.n_layers:
        raise IndexError(f"stop_layer {stop_layer} must lie in [{start_layer}, {config.n_layers})")
    positions = tuple(range(input.length))
    run = _Pass(bundle, hooks, positions, input.roles, step=0, cache=None, builder=builder)
    residual, attn_out = run.run(np.asarray(residual_in, dtype=np.float64), start_layer, stop_layer)
    logits = unembed(bundle, residual, tape=hooks.tape) if stop_layer is None else None
    if builder is None:
        trace = ActivationTrace(config, input.fingerprint(), input.length, {})
    else:
        trace = builder.freeze(input.fingerprint(), input.length)
    return PartialResult(residual=residual, attn_out=attn_out, logits=logits, trace=trace)


def forward_from(
    bundle: ModelBundle,
    input: InputSequence,
    residual_in: Array,
    start_layer: int,
    *,
    hooks: ForwardHooks | None = None,
    stop_layer: int | None = None,
) -> PartialResult:
    """
    Run blocks `start_layer..stop_layer` from a given residual.

    `residual_in` is the residual entering `start_layer`: the embedded rows for layer 0, or the
    recorded post-block residual of the previous layer. With `stop_layer` set, the pass ends
    after that layer's attention and no logits are produced.
    """
    input.validate(bundle.config)
    hooks = hooks or ForwardHooks()
    builder = None if hooks.capture.is_empty else _TraceBuilder(bundle.config, hooks.capture)
    return _run_range(bundle, input, residual_in, start_layer, stop_layer, hooks, builder)


def forward(
    bundle: ModelBundle,
    input: InputSequence,
    capture: CaptureFilter | None = None,
    *,
    hooks: ForwardHooks | None = None,
) -> tuple[Array, ActivationTrace]:
    """
    Full forward pass.

    Args:
        bundle: Model to run.
        input: Visual prefix and text tokens.
        capture: Tensors to record; overrides `hooks.capture` when given.
        hooks: Overrides and observers for the pass.

    Returns:
        Logits of shape (length, vocab_size) and the recorded trace.

    Raises:
        SequenceLengthError: If the input is longer than `max_seq`.
    """
    hooks = hooks or ForwardHooks()
    if capture is not None:
        hooks = hooks.replace(capture=capture)
    x = embed(bundle, input)
    builder = None
    if not hooks.capture.is_empty:
        builder = _TraceBuilder(bundle.config, hooks.capture)
        builder.put_embedded(tuple(range(input.length)), x)
    result = _run_range(bundle, input, x, 0, None, hooks, builder)
    assert result.logits is not None
    return result.logits, result.trace


def decode_steps(
    bundle: ModelBundle,
    input: InputSequence,
    max_new: int,
    intervention: Intervention | None = None,
    *,
    hooks: ForwardHooks | None = None,
) -> DecodeResult:
    """
    Greedy decoding with a KV cache, keeping the logits of every step.

    Step 0 is the prefill over the whole input; step t > 0 processes the token generated at step
    t - 1 at position `input.length + t - 1`. Generated positions carry a positional embedding
    and the Last role. Every hook keyed by position applies when that position is processed.

    Raises:
        ValueError: If `max_new` is less than one.
        SequenceLengthError: If a processed position would reach `max_seq`. The last generated
            token is never fed back, so the input plus `max_new - 1` tokens must fit.
    """
    config = bundle.config
    if max_new < 1:
        raise ValueError(f"max_new must be at least 1, got {max_new}")
    input.validate(config)
    if input.length + max_new - 1 > config.max_seq:
        raise SequenceLengthError(input.length + max_new - 1, config.max_seq)
    hooks = (hooks or ForwardHooks()).replace(capture=CaptureFilter(), tape=None)
    if intervention is not None:
        hooks = hooks.replace(intervention=intervention.start(config))

    state = DecodeState.empty(config, input.roles)
    positions: tuple[int, ...] = tuple(range(input.length))
    x = embed(bundle, input)
    tokens: list[int] = []
    step_logits: list[Array] = []
    for step in range(max_new):
        run = _Pass(bundle, hooks, positions, state.roles, step=step, cache=state, builder=None)
        residual, _ = run.run(x, 0, None)
        logits = unembed(bundle, residual[-1:])[0]
        step_logits.append(logits)
        # argmax returns the first maximum: ties go to the lowest token id
        token = int(np.argmax(logits))
        tokens.append(token)
        if step == max_new - 1:
            break
        position = state.length
        state.roles.append(TokenRole.LAST)
        positions = (position,)
        x = embed_token(bundle, token, position)[None, :]
    return DecodeResult(tokens=tokens, step_logits=step_logits)


def greedy_decode(
    bundle: ModelBundle,
    input: InputSequence,
    max_new: int,
    intervention: Intervention | None = None,
    *,
    hooks: ForwardHooks | None = None,
) -> list[int]:
    """Greedy continuation of `input`; see `decode_steps`."""
    return decode_steps(bundle, input, max_new, intervention, hooks=hooks).tokens
