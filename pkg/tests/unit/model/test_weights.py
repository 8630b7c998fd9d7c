import numpy as np
import pytest

from emocircuit.exceptions import ShapeError, WeightFormatError
from emocircuit.model import (
    WEIGHT_MAGIC,
    ModelBundle,
    ModelConfig,
    encode_weights,
    expected_shapes,
    init_random,
    load_weights,
    save_weights,
)


@pytest.mark.unit
def test_init_random_is_deterministic(tiny_config: ModelConfig) -> None:
    first, second = init_random(tiny_config, 3), init_random(tiny_config, 3)
    assert encode_weights(first) == encode_weights(second)
    assert encode_weights(first) != encode_weights(init_random(tiny_config, 4))


@pytest.mark.unit
def test_weights_file_round_trip(tmp_path, tiny_bundle: ModelBundle) -> None:
    path = save_weights(tiny_bundle, tmp_path / "model" / "weights.emc")
    assert path.read_bytes()[:4] == WEIGHT_MAGIC
    loaded = load_weights(path)
    assert loaded.config == tiny_bundle.config
    for (name, original), (_, restored) in zip(
        tiny_bundle.weights.named_matrices(), loaded.weights.named_matrices(), strict=True
    ):
        assert np.array_equal(original, restored), name


@pytest.mark.unit
@pytest.mark.parametrize("damage", ["magic", "flip", "truncate"])
def test_damaged_weight_file_is_rejected(tmp_path, tiny_bundle: ModelBundle, damage: str) -> None:
    data = bytearray(encode_weights(tiny_bundle))
    if damage == "magic":
        data[:4] = b"XXXX"
    elif damage == "flip":
        data[len(data) // 2] ^= 0xFF
    else:
        data = data[:-100]
    path = tmp_path / "weights.emc"
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFormatError):
        load_weights(path)


@pytest.mark.unit
def test_weights_must_match_config(tiny_config: ModelConfig, tiny_bundle: ModelBundle) -> None:
    bigger = ModelConfig(**{**tiny_config.to_dict(), "d_mlp": 32})
    with pytest.raises(ShapeError):
        ModelBundle(bigger, tiny_bundle.weights)


@pytest.mark.unit
def test_replace_layer_keeps_other_layers(tiny_bundle: ModelBundle) -> None:
    zeros = np.zeros_like(tiny_bundle.weights.layers[1].w_q)
    weights = tiny_bundle.weights.replace_layer(1, w_q=zeros)
    assert np.array_equal(weights.layers[1].w_q, zeros)
    assert weights.layers[0] is tiny_bundle.weights.layers[0]
    assert np.any(tiny_bundle.weights.layers[1].w_q != 0.0)


@pytest.mark.unit
def test_expected_shapes_cover_every_matrix(tiny_config: ModelConfig, tiny_bundle: ModelBundle) -> None:
    shapes = dict(expected_shapes(tiny_config))
    assert len(shapes) == 2 + 10 * tiny_config.n_layers + 3
    for name, array in tiny_bundle.weights.named_matrices():
        assert array.shape == shapes[name]
