"""
A toy model with a hand-wired emotional pathway per emotion.

The pathway of one emotion, in residual-space terms:

    visual position carrying f  --trigger neuron (l_trig)-->  routed direction r at that position
    Q rows  --copy head (l_copy) attends to r, writes e-->    e on every Q row
    Last and generated rows  --readout head (l_read) attends to Q, copies e-->  e on the Last row
    unembedding columns of the emotion's keywords align with e

Every plant direction, the two role anchors and the all-ones vector span the plant subspace.
Background weights read from and write to its orthogonal complement only, so the pathway is
exact up to layer-norm scaling. Q rows carry a query anchor and the Last and generated rows a
last anchor through the positional embedding, which fixes the text length of planted inputs.
"""

import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.circuit import decodes_containing
from emocircuit.eval import Lexicon
from emocircuit.exceptions import ModelConfigError, PlantConstructionError, PlantRetryWarning
from emocircuit.model import (
    CaptureFilter,
    InputSequence,
    LayerWeights,
    ModelBundle,
    ModelConfig,
    ModelWeights,
    TokenRole,
    forward,
    greedy_decode,
)
from emocircuit.numerics import derive_seed, seeded_rng
from emocircuit.steering import ContrastivePair

Array = NDArray[np.float64]

DEFAULT_TEXT_LENGTH = 8
DEFAULT_STRENGTH = 1.0
MAX_ATTEMPTS = 8
GATE_PAIRS = 8
# trigger >= 5x negative, copy attention >= 0.5, decode gates 80% / 20%
TRIGGER_RATIO = 5.0
COPY_ATTENTION = 0.5
POSITIVE_RATE = 0.8
NEGATIVE_RATE = 0.2


def _unit(vector: Any) -> Array:
    array = np.array(vector, dtype=np.float64, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class PlantSpec:
    """
    Pathway of one emotion.

    Attributes:
        emotion: Emotion label.
        feature: Trigger feature direction f, added to one visual row of positive inputs.
        routed: Direction r the trigger neuron writes back at the visual position.
        direction: Emotion direction e written by the copy and readout heads.
        trigger: Trigger neuron (l_trig, u_trig).
        copy_head: Copy head (l_copy, h_copy).
        read_head: Readout head (l_read, h_read).
        keywords: Keyword token ids the pathway promotes, core word first.
        strength: Feature strength of dataset positives.
    """

    emotion: str
    feature: Array
    routed: Array
    direction: Array
    trigger: tuple[int, int]
    copy_head: tuple[int, int]
    read_head: tuple[int, int]
    keywords: tuple[int, ...]
    strength: float = DEFAULT_STRENGTH

    def __post_init__(self) -> None:
        for name in ("feature", "routed", "direction"):
            vector = _unit(getattr(self, name))
            if not math.isclose(float(np.linalg.norm(vector)), 1.0, abs_tol=1e-9):
                raise ValueError(f"{self.emotion}: {name} must have unit norm")
            object.__setattr__(self, name, vector)
        object.__setattr__(self, "trigger", tuple(int(i) for i in self.trigger))
        object.__setattr__(self, "copy_head", tuple(int(i) for i in self.copy_head))
        object.__setattr__(self, "read_head", tuple(int(i) for i in self.read_head))
        object.__setattr__(self, "keywords", tuple(int(t) for t in self.keywords))
        if not self.trigger[0] < self.copy_head[0] < self.read_head[0]:
            raise ValueError(f"{self.emotion}: plant layers must satisfy l_trig < l_copy < l_read")
        if not self.keywords:
            raise ValueError(f"{self.emotion}: a plant needs at least one keyword token")

    @property
    def heads(self) -> frozenset[tuple[int, int]]:
        return frozenset({self.copy_head, self.read_head})

    def to_dict(self) -> dict[str, Any]:
        return {
            "emotion": self.emotion,
            "trigger": list(self.trigger),
            "copy_head": list(self.copy_head),
            "read_head": list(self.read_head),
            "keywords": list(self.keywords),
            "strength": self.strength,
        }


@dataclass(frozen=True)
class PlantSet:
    """
    Plants of every emotion plus the anchors and text layout they share.

    Attributes:
        plants: One plant per emotion, in emotion order.
        query_anchor: Positional direction of Q positions.
        last_anchor: Positional direction of the Last and generated positions.
        text_length: Text length of planted inputs.
        filler_token: Neutral token predicted when no emotion reaches the Last row.
    """

    plants: tuple[PlantSpec, ...]
    query_anchor: Array
    last_anchor: Array
    text_length: int = DEFAULT_TEXT_LENGTH
    filler_token: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "plants", tuple(self.plants))
        object.__setattr__(self, "query_anchor", _unit(self.query_anchor))
        object.__setattr__(self, "last_anchor", _unit(self.last_anchor))
        if self.text_length < 2:
            raise ValueError("planted inputs need at least one Q position and the Last position")

    @property
    def emotions(self) -> tuple[str, ...]:
        return tuple(p.emotion for p in self.plants)

    def for_emotion(self, emotion: str) -> PlantSpec:
        for plant in self.plants:
            if plant.emotion == emotion:
                return plant
        raise KeyError(emotion)

    @property
    def planted_heads(self) -> frozenset[tuple[int, int]]:
        return frozenset().union(*(p.heads for p in self.plants))

    def basis(self) -> Array:
        """Orthonormal rows spanning the plant subspace, the normalized all-ones vector first."""
        d = self.query_anchor.shape[0]
        rows = [np.full(d, 1.0 / math.sqrt(d)), self.query_anchor, self.last_anchor]
        for plant in self.plants:
            rows.extend([plant.feature, plant.routed, plant.direction])
        return np.stack(rows)

    def background_projector(self) -> Array:
        """Projector onto the orthogonal complement of the plant subspace."""
        basis = self.basis()
        return np.eye(basis.shape[1]) - basis.T @ basis

    def neutral_tokens(self, vocab_size: int) -> tuple[int, ...]:
        """Token ids neither a keyword nor the filler, for neutral event text."""
        reserved = {self.filler_token}.union(*(p.keywords for p in self.plants))
        return tuple(t for t in range(vocab_size) if t not in reserved)

    def to_dict(self) -> dict[str, Any]:
        return {
            "plants": [p.to_dict() for p in self.plants],
            "text_length": self.text_length,
            "filler_token": self.filler_token,
        }


def plant_layers(config: ModelConfig) -> tuple[int, int, int]:
    """(l_trig, l_copy, l_read) for a config's phase boundaries."""
    layers = (max(config.adapt_end - 1, 0), config.adapt_end + 1, config.aggregate_end + 1)
    if not layers[0] < layers[1] < layers[2] < config.n_layers:
        raise ModelConfigError(
            f"a planted circuit needs l_trig < l_copy < l_read < n_layers, got {layers} for {config.n_layers} layers"
        )
    return layers


def default_plants(
    config: ModelConfig,
    lexicon: Lexicon,
    seed: int,
    *,
    strength: float = DEFAULT_STRENGTH,
    text_length: int = DEFAULT_TEXT_LENGTH,
) -> PlantSet:
    """
    Mutually orthogonal, mean-zero plant directions for every lexicon emotion.

    Emotion i gets trigger neuron i * (d_mlp // n_emotions) and head i % n_heads at the copy
    and readout layers.

    Raises:
        ModelConfigError: If the model is too small to host the plants.
    """
    emotions = lexicon.emotions
    n = len(emotions)
    d = config.d_model
    l_trig, l_copy, l_read = plant_layers(config)
    n_directions = 3 * n + 2
    if n_directions + 2 > d:
        raise ModelConfigError(f"d_model {d} cannot host {n_directions} plant directions and a background")
    if config.d_mlp < n:
        raise ModelConfigError(f"d_mlp {config.d_mlp} is smaller than the number of emotions {n}")
    if config.d_head < 1 + math.ceil(n / config.n_heads):
        raise ModelConfigError(f"d_head {config.d_head} is too small for {n} emotions on {config.n_heads} heads")
    filler = max(lexicon.all_tokens()) + 1
    if filler >= config.vocab_size or text_length + config.n_visual > config.max_seq:
        raise ModelConfigError("vocabulary or context too small for the planted layout")

    rng = seeded_rng(derive_seed(seed, "plants"))
    draws = rng.standard_normal((d, n_directions + 1))
    draws[:, 0] = 1.0
    q, _ = np.linalg.qr(draws)
    directions = q[:, 1:].T
    stride = config.d_mlp // n
    plants = []
    for i, emotion in enumerate(emotions):
        feature, routed, direction = directions[2 + 3 * i : 5 + 3 * i]
        plants.append(
            PlantSpec(
                emotion=emotion,
                feature=feature,
                routed=routed,
                direction=direction,
                trigger=(l_trig, i * stride),
                copy_head=(l_copy, i % config.n_heads),
                read_head=(l_read, i % config.n_heads),
                keywords=lexicon.emotion_tokens(emotion),
                strength=strength,
            )
        )
    return PlantSet(tuple(plants), directions[0], directions[1], text_length, filler)


@dataclass(frozen=True)
class Wiring:
    """
    Gains of the planted pathway.

    `last_anchor` sets the decision threshold: the keyword wins at the Last row once the
    emotion coefficient there exceeds it. The background scales are standard deviations
    relative to 1/sqrt(d_model).
    """

    trigger_gain: float = 4.0
    route_gain: float = 1.0
    copy_qk: float = 1.0
    copy_ov: float = 1.0
    read_qk: float = 1.5
    read_ov: float = 1.0
    unembed_gain: float = 4.0
    query_anchor: float = 1.0
    last_anchor: float = 2.67
    background: float = 0.05
    unembed_background: float = 0.02

    def scaled(self, factor: float) -> "Wiring":
        """Every pathway gain multiplied by `factor`; anchors and background unchanged."""
        return replace(
            self,
            trigger_gain=self.trigger_gain * factor,
            copy_qk=self.copy_qk * factor,
            copy_ov=self.copy_ov * factor,
            read_qk=self.read_qk * factor,
            read_ov=self.read_ov * factor,
        )

    def to_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.__dataclass_fields__}


def wire_model(config: ModelConfig, plants: PlantSet, seed: int, wiring: Wiring | None = None) -> ModelBundle:
    """Background weights from `seed` plus the planted pathway; no gate is checked."""
    wiring = wiring or Wiring()
    d, m, vocab = config.d_model, config.d_mlp, config.vocab_size
    dh = config.d_head
    projector = plants.background_projector()
    rng = seeded_rng(derive_seed(seed, "background"))
    sigma = wiring.background / math.sqrt(d)

    def background(rows: int, cols: int) -> Array:
        return rng.standard_normal((rows, cols)) * sigma

    token_embedding = (rng.standard_normal((vocab, d)) / math.sqrt(d)) @ projector
    pos_embedding = np.zeros((config.max_seq, d))
    last = config.n_visual + plants.text_length - 1
    for position in range(config.n_visual, config.max_seq):
        if position < last:
            pos_embedding[position] = wiring.query_anchor * plants.query_anchor
        else:
            pos_embedding[position] = wiring.last_anchor * plants.last_anchor

    planted_heads = plants.planted_heads
    planted_neurons = {p.trigger for p in plants.plants}
    layers = []
    for layer in range(config.n_layers):
        w_q = projector @ background(d, d)
        w_k = projector @ background(d, d)
        w_v = projector @ background(d, d)
        w_o = background(d, d) @ projector
        w_up = projector @ background(d, m)
        w_down = background(m, d) @ projector
        for head_layer, head in planted_heads:
            if head_layer == layer:
                cols = slice(head * dh, (head + 1) * dh)
                w_q[:, cols] = 0.0
                w_k[:, cols] = 0.0
                w_v[:, cols] = 0.0
                w_o[cols, :] = 0.0
        for neuron_layer, neuron in planted_neurons:
            if neuron_layer == layer:
                w_up[:, neuron] = 0.0
                w_down[neuron, :] = 0.0

        for index, plant in enumerate(plants.plants):
            slot = 1 + index // config.n_heads
            if plant.trigger[0] == layer:
                w_up[:, plant.trigger[1]] = wiring.trigger_gain * plant.feature
                w_down[plant.trigger[1], :] = wiring.route_gain * plant.routed
            if plant.copy_head[0] == layer:
                base = plant.copy_head[1] * dh
                w_q[:, base] = wiring.copy_qk * plants.query_anchor
                w_k[:, base] += wiring.copy_qk * plant.routed
                w_v[:, base + slot] += wiring.copy_ov * plant.routed
                w_o[base + slot, :] += wiring.copy_ov * plant.direction
            if plant.read_head[0] == layer:
                base = plant.read_head[1] * dh
                w_q[:, base] = wiring.read_qk * plants.last_anchor
                w_k[:, base] = wiring.read_qk * plants.query_anchor
                w_v[:, base + slot] += wiring.read_ov * plant.direction
                w_o[base + slot, :] += wiring.read_ov * plant.direction
        layers.append(
            LayerWeights(
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                w_q=w_q,
                w_k=w_k,
                w_v=w_v,
                w_o=w_o,
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
                w_up=w_up,
                w_down=w_down,
            )
        )

    unembedding = projector @ (rng.standard_normal((d, vocab)) * wiring.unembed_background / math.sqrt(d))
    for plant in plants.plants:
        for rank, token in enumerate(plant.keywords):
            # the core word wins among synonyms
            unembedding[:, token] = wiring.unembed_gain * (1.0 - 0.05 * rank) * plant.direction
    unembedding[:, plants.filler_token] = wiring.unembed_gain * plants.last_anchor

    weights = ModelWeights(
        token_embedding=token_embedding,
        pos_embedding=pos_embedding,
        layers=tuple(layers),
        ln_final_gain=np.ones(d),
        ln_final_bias=np.zeros(d),
        unembedding=unembedding,
    )
    return ModelBundle(config, weights)


@dataclass(frozen=True)
class PlantGates:
    """
    Construction targets measured on gate pairs.

    Attributes:
        trigger_margin: Smallest positive trigger activation minus TRIGGER_RATIO times the
            absolute negative activation, over emotions and pairs.
        copy_attention: Smallest mean attention from Q rows to the feature position on
            the copy head, over emotions and pairs.
        positive_rate: Fraction of positive decodes naming a keyword of the pair's emotion.
        negative_rate: Fraction of negative decodes naming any keyword.
    """

    trigger_margin: float
    copy_attention: float
    positive_rate: float
    negative_rate: float

    @property
    def passed(self) -> bool:
        return (
            self.trigger_margin > 0.0
            and self.copy_attention >= COPY_ATTENTION
            and self.positive_rate >= POSITIVE_RATE
            and self.negative_rate <= NEGATIVE_RATE
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "trigger_margin": self.trigger_margin,
            "copy_attention": self.copy_attention,
            "positive_rate": self.positive_rate,
            "negative_rate": self.negative_rate,
            "passed": self.passed,
        }


def measure_gates(
    bundle: ModelBundle, plants: PlantSet, pairs: Sequence[ContrastivePair], *, max_new: int = 8
) -> PlantGates:
    """Read the trigger, copy attention and decode gates off `pairs`."""
    margins: list[float] = []
    attention: list[float] = []
    positive: list[list[int]] = []
    negative: list[list[int]] = []
    hits = 0
    keywords = sorted({t for p in plants.plants for t in p.keywords})
    for pair in pairs:
        plant = plants.for_emotion(pair.emotion)
        trigger_layer, neuron = plant.trigger
        copy_layer, head = plant.copy_head
        capture = CaptureFilter(neuron=True, scores=True, layers=frozenset({trigger_layer, copy_layer}))
        _, trace_plus = forward(bundle, pair.x_plus, capture)
        _, trace_minus = forward(bundle, pair.x_minus, capture)
        position = pair.visual_pos if pair.visual_pos is not None else 0
        act_plus = float(trace_plus.neuron(trigger_layer, position)[neuron])
        act_minus = float(trace_minus.neuron(trigger_layer, position)[neuron])
        margins.append(act_plus - TRIGGER_RATIO * abs(act_minus))
        probs = trace_plus.attention_probs(copy_layer, head)
        rows = pair.x_plus.positions(TokenRole.QUERY)
        attention.append(float(np.mean(probs[list(rows), position])))
        decode_plus = greedy_decode(bundle, pair.x_plus, max_new)
        positive.append(decode_plus)
        hits += any(t in plant.keywords for t in decode_plus)
        negative.append(greedy_decode(bundle, pair.x_minus, max_new))
    return PlantGates(
        trigger_margin=min(margins, default=0.0),
        copy_attention=min(attention, default=0.0),
        positive_rate=hits / len(pairs) if pairs else 0.0,
        negative_rate=decodes_containing(negative, keywords) if negative else 0.0,
    )


@dataclass(frozen=True)
class PlantedModel:
    """A planted bundle with the wiring and gate values it was accepted with."""

    bundle: ModelBundle
    plants: PlantSet
    wiring: Wiring
    attempts: int
    gates: PlantGates

    def to_dict(self) -> dict[str, Any]:
        return {
            "plants": self.plants.to_dict(),
            "wiring": self.wiring.to_dict(),
            "attempts": self.attempts,
            "gates": self.gates.to_dict(),
            "model": self.bundle.config.to_dict(),
        }


def build_planted_model(
    config: ModelConfig,
    plants: PlantSet,
    seed: int,
    *,
    wiring: Wiring | None = None,
    max_attempts: int = MAX_ATTEMPTS,
    gate_pairs: int = GATE_PAIRS,
    gate_pair_set: Mapping[str, Sequence[ContrastivePair]] | None = None,
) -> PlantedModel:
    """
    Wire the plants into a background model and check the construction gates.

    A failed attempt doubles every pathway gain and tries again. Gate pairs are drawn from a
    sub-stream of `seed` unless given.

    Raises:
        PlantConstructionError: If the gates still fail after `max_attempts` attempts.
    """
    if gate_pair_set is None:
        pairs = gen_pairs(derive_seed(seed, "gates"), gate_pairs, plants, config)
    else:
        pairs = [p for emotion in sorted(gate_pair_set) for p in gate_pair_set[emotion]]
    wiring = wiring or Wiring()
    gates = PlantGates(0.0, 0.0, 0.0, 1.0)
    for attempt in range(max_attempts):
        scaled = wiring.scaled(2.0**attempt)
        bundle = wire_model(config, plants, seed, scaled)
        gates = measure_gates(bundle, plants, pairs)
        if gates.passed:
            return PlantedModel(bundle, plants, scaled, attempt + 1, gates)
        warnings.warn(
            f"planted circuit attempt {attempt + 1} missed its gates ({gates.to_dict()}); doubling wiring strength",
            PlantRetryWarning,
            stacklevel=2,
        )
    raise PlantConstructionError(max_attempts, gates.to_dict())


def neutral_visual(rng: np.random.Generator, config: ModelConfig, plants: PlantSet) -> Array:
    """Gaussian visual rows projected off the plant subspace."""
    draws = rng.standard_normal((config.n_visual, config.d_model)) / math.sqrt(config.d_model)
    return draws @ plants.background_projector()


def gen_pairs(
    seed: int,
    n_pairs: int,
    plants: PlantSet,
    config: ModelConfig,
    *,
    strength: float | None = None,
    start: int = 0,
) -> list[ContrastivePair]:
    """
    `n_pairs` contrastive pairs per emotion, ordered by emotion, then id.

    The negative visual prefix is neutral; the positive adds `strength * f` (default: the
    plant's strength) at one uniformly drawn visual position. Both share random neutral text
    of the planted length. Each emotion draws from its own sub-stream of `seed`, and ids run
    from `start`.
    """
    if config.n_visual < 1:
        raise ModelConfigError("planted pairs need at least one visual position")
    tokens = np.array(plants.neutral_tokens(config.vocab_size))
    pairs = []
    for plant in plants.plants:
        rng = seeded_rng(derive_seed(seed, "pairs", plant.emotion))
        scale = plant.strength if strength is None else strength
        for index in range(start, start + n_pairs):
            negative = neutral_visual(rng, config, plants)
            position = int(rng.integers(config.n_visual))
            text = tokens[rng.integers(len(tokens), size=plants.text_length)]
            positive = negative.copy()
            positive[position] += scale * plant.feature
            pairs.append(
                ContrastivePair(
                    pair_id=f"{plant.emotion}-{index:04d}",
                    emotion=plant.emotion,
                    x_plus=InputSequence(positive, text.tolist()),
                    x_minus=InputSequence(negative, text.tolist()),
                    visual_pos=position,
                )
            )
    return pairs
