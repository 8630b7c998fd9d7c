import dataclasses
import math
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import ModelConfigError, ShapeError, WeightFormatError
from emocircuit.model._config import ModelConfig
from emocircuit.numerics import seeded_rng
from emocircuit.utils.binary import decode_container, encode_container, split_payload, write_bytes_atomic

Array = NDArray[np.float64]

WEIGHT_MAGIC = b"EMC1"

_LAYER_FIELDS = ("ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_up", "w_down")


def _layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = config.d_model, config.d_mlp
    return {
        "ln1_gain": (d,),
        "ln1_bias": (d,),
        "w_q": (d, d),
        "w_k": (d, d),
        "w_v": (d, d),
        "w_o": (d, d),
        "ln2_gain": (d,),
        "ln2_bias": (d,),
        "w_up": (d, m),
        "w_down": (m, d),
    }


def _frozen_copy(array: Any) -> Array:
    result = np.array(array, dtype=np.float64, copy=True)
    result.flags.writeable = False
    return result


@dataclass(frozen=True)
class LayerWeights:
    """
    Parameters of one pre-norm block.

    Projections act on row vectors: `q = LN1(x) @ w_q`. `w_down` is stored (d_mlp, d_model), so
    row u is the write direction of neuron u.
    """

    ln1_gain: Array
    ln1_bias: Array
    w_q: Array
    w_k: Array
    w_v: Array
    w_o: Array
    ln2_gain: Array
    ln2_bias: Array
    w_up: Array
    w_down: Array

    def __post_init__(self) -> None:
        for name in _LAYER_FIELDS:
            object.__setattr__(self, name, _frozen_copy(getattr(self, name)))

    def head_slice(self, config: ModelConfig, head: int) -> slice:
        if not 0 <= head < config.n_heads:
            raise IndexError(f"head {head} out of range [0, {config.n_heads})")
        return slice(head * config.d_head, (head + 1) * config.d_head)

    def replace(self, **changes: Any) -> "LayerWeights":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ModelWeights:
    token_embedding: Array
    pos_embedding: Array
    layers: tuple[LayerWeights, ...]
    ln_final_gain: Array
    ln_final_bias: Array
    unembedding: Array

    def __post_init__(self) -> None:
        for name in ("token_embedding", "pos_embedding", "ln_final_gain", "ln_final_bias", "unembedding"):
            object.__setattr__(self, name, _frozen_copy(getattr(self, name)))
        object.__setattr__(self, "layers", tuple(self.layers))

    def named_matrices(self) -> Iterator[tuple[str, Array]]:
        """Every parameter in weight-file order."""
        yield "token_embedding", self.token_embedding
        yield "pos_embedding", self.pos_embedding
        for index, layer in enumerate(self.layers):
            for name in _LAYER_FIELDS:
                yield f"layers.{index}.{name}", getattr(layer, name)
        yield "ln_final_gain", self.ln_final_gain
        yield "ln_final_bias", self.ln_final_bias
        yield "unembedding", self.unembedding

    def validate(self, config: ModelConfig) -> None:
        """
        Raises:
            ShapeError: If any matrix disagrees with `config`.
        """
        for name, shape in expected_shapes(config):
            actual = self._lookup(name).shape
            if actual != shape:
                raise ShapeError("ModelWeights", actual, shape, message=f"{name} has shape {actual}, expected {shape}")
        if len(self.layers) != config.n_layers:
            raise ShapeError("ModelWeights", message=f"{len(self.layers)} layers, expected {config.n_layers}")

    def _lookup(self, name: str) -> Array:
        if name.startswith("layers."):
            _, index, field = name.split(".")
            if int(index) >= len(self.layers):
                raise ShapeError("ModelWeights", message=f"missing layer {index}")
            return getattr(self.layers[int(index)], field)  # type: ignore[no-any-return]
        return getattr(self, name)  # type: ignore[no-any-return]

    def replace_layer(self, index: int, **changes: Any) -> "ModelWeights":
        layers = list(self.layers)
        layers[index] = layers[index].replace(**changes)
        return dataclasses.replace(self, layers=tuple(layers))

    def replace(self, **changes: Any) -> "ModelWeights":
        return dataclasses.replace(self, **changes)


def expected_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = config.d_model, config.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("token_embedding", (v, d)), ("pos_embedding", (config.max_seq, d))]
    per_layer = _layer_shapes(config)
    for index in range(config.n_layers):
        shapes.extend((f"layers.{index}.{name}", per_layer[name]) for name in _LAYER_FIELDS)
    shapes.extend([("ln_final_gain", (d,)), ("ln_final_bias", (d,)), ("unembedding", (d, v))])
    return shapes


def _from_flat(config: ModelConfig, arrays: list[Array]) -> ModelWeights:
    it = iter(arrays)
    token_embedding, pos_embedding = next(it), next(it)
    layers = tuple(LayerWeights(**{name: next(it) for name in _LAYER_FIELDS}) for _ in range(config.n_layers))
    return ModelWeights(
        token_embedding=token_embedding,
        pos_embedding=pos_embedding,
        layers=layers,
        ln_final_gain=next(it),
        ln_final_bias=next(it),
        unembedding=next(it),
    )


@dataclass(frozen=True)
class ModelBundle:
    """
    A configuration together with matching weights.

    Bundles are immutable; any number of forward or decode passes may share one.
    """

    config: ModelConfig
    weights: ModelWeights

    def __post_init__(self) -> None:
        self.weights.validate(self.config)

    def with_weights(self, weights: ModelWeights) -> "ModelBundle":
        return ModelBundle(self.config, weights)


def init_random(config: ModelConfig, seed: int) -> ModelBundle:
    """
    Gaussian weights with standard deviation 1/sqrt(d_model), deterministic in `seed`.

    Draw order: token embedding, positional embedding, then per layer w_q, w_k, w_v, w_o, w_up,
    w_down, then the unembedding. Layer-norm gains are one and biases zero.
    """
    rng = seeded_rng(seed)
    d, m = config.d_model, config.d_mlp
    std = 1.0 / math.sqrt(d)

    def draw(*shape: int) -> Array:
        return rng.standard_normal(shape) * std

    token_embedding = draw(config.vocab_size, d)
    pos_embedding = draw(config.max_seq, d)
    layers = []
    for _ in range(config.n_layers):
        w_q, w_k, w_v, w_o = draw(d, d), draw(d, d), draw(d, d), draw(d, d)
        w_up, w_down = draw(d, m), draw(m, d)
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
    unembedding = draw(d, config.vocab_size)
    weights = ModelWeights(
        token_embedding=token_embedding,
        pos_embedding=pos_embedding,
        layers=tuple(layers),
        ln_final_gain=np.ones(d),
        ln_final_bias=np.zeros(d),
        unembedding=unembedding,
    )
    return ModelBundle(config, weights)


def zero_weights(config: ModelConfig) -> ModelBundle:
    """All-zero matrices with unit layer-norm gains; a starting point for hand-built models."""
    arrays = [
        np.ones(shape) if name.endswith("gain") else np.zeros(shape) for name, shape in expected_shapes(config)
    ]
    return ModelBundle(config, _from_flat(config, arrays))


def encode_weights(bundle: ModelBundle) -> bytes:
    return encode_container(
        WEIGHT_MAGIC,
        bundle.config.to_dict(),
        (array for _, array in bundle.weights.named_matrices()),
        versioned=False,
    )


def save_weights(bundle: ModelBundle, path: str | Path) -> Path:
    """
    Write `bundle` as an EMC1 weight file.

    Layout: b"EMC1", u32 LE header length, the config as canonical JSON, every matrix of
    `ModelWeights.named_matrices` as little-endian float64, then a CRC-32 of all preceding bytes.
    """
    return write_bytes_atomic(path, encode_weights(bundle))


def load_weights(path: str | Path) -> ModelBundle:
    """
    Raises:
        WeightFormatError: On a corrupt header, checksum mismatch, truncation, or matrices that
            do not match the embedded config.
    """
    header, payload = decode_container(Path(path).read_bytes(), WEIGHT_MAGIC, error=WeightFormatError)
    try:
        config = ModelConfig.from_dict(header)
    except (ModelConfigError, TypeError) as e:
        raise WeightFormatError(f"invalid embedded config: {e}") from e
    arrays = split_payload(payload, [shape for _, shape in expected_shapes(config)], error=WeightFormatError)
    return ModelBundle(config, _from_flat(config, arrays))
