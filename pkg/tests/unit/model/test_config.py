"""Unit tests for ModelConfig and InputSequence."""

import numpy as np
import pytest

from emocircuit.exceptions import ModelConfigError, SequenceLengthError, ShapeError
from emocircuit.model import InputSequence, ModelConfig, Phase, TokenRole


@pytest.mark.unit
def test_default_config_phases() -> None:
    config = ModelConfig()
    assert config.d_head == 16
    assert [config.phase_of(layer) for layer in (0, 3, 4, 7, 8, 11)] == [
        Phase.ADAPT,
        Phase.ADAPT,
        Phase.AGGREGATE,
        Phase.AGGREGATE,
        Phase.LATE,
        Phase.LATE,
    ]
    assert list(config.phase_layers(Phase.AGGREGATE)) == [4, 5, 6, 7]


@pytest.mark.unit
@pytest.mark.parametrize(
    "changes",
    [
        {"d_model": 10, "n_heads": 4},
        {"n_layers": 0},
        {"adapt_end": 7, "aggregate_end": 7},
        {"aggregate_end": 12},
        {"n_visual": 128},
        {"n_heads": 2.0},
    ],
)
def test_invalid_configs_are_rejected(changes: dict) -> None:
    with pytest.raises(ModelConfigError):
        ModelConfig(**changes)


@pytest.mark.unit
def test_two_layer_toys_may_collapse_phases() -> None:
    config = ModelConfig(n_layers=2, adapt_end=1, aggregate_end=1)
    assert list(config.phase_layers(Phase.LATE)) == []


@pytest.mark.unit
def test_config_dict_round_trip_rejects_unknown_fields() -> None:
    config = ModelConfig(n_layers=6, adapt_end=1, aggregate_end=3)
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(ModelConfigError, match="unknown"):
        ModelConfig.from_dict({**config.to_dict(), "n_experts": 2})


@pytest.mark.unit
def test_parameter_count_of_default_model() -> None:
    config = ModelConfig()
    per_layer = 4 * 64 * 64 + 2 * 64 * 256 + 4 * 64
    assert config.parameter_count == 512 * 64 + 128 * 64 + 12 * per_layer + 2 * 64 + 64 * 512


@pytest.mark.unit
def test_input_roles(tiny_config: ModelConfig) -> None:
    """Visual prefix, every text position but the last, then Last."""
    sequence = InputSequence(np.zeros((3, 8)), [5, 6, 7])
    assert sequence.roles == (
        TokenRole.VISUAL,
        TokenRole.VISUAL,
        TokenRole.VISUAL,
        TokenRole.QUERY,
        TokenRole.QUERY,
        TokenRole.LAST,
    )
    assert sequence.positions(TokenRole.QUERY) == (3, 4)
    assert sequence.last_position == 5
    sequence.validate(tiny_config)


@pytest.mark.unit
def test_input_needs_a_text_token() -> None:
    with pytest.raises(ValueError):
        InputSequence(np.zeros((3, 8)), [])


@pytest.mark.unit
def test_input_validation_errors(tiny_config: ModelConfig) -> None:
    with pytest.raises(ShapeError):
        InputSequence(np.zeros((2, 8)), [1]).validate(tiny_config)
    with pytest.raises(SequenceLengthError):
        InputSequence(np.zeros((3, 8)), [1] * 22).validate(tiny_config)
    with pytest.raises(IndexError):
        InputSequence(np.zeros((3, 8)), [40]).validate(tiny_config)


@pytest.mark.unit
def test_input_is_immutable_and_hashable() -> None:
    visual = np.ones((2, 4))
    sequence = InputSequence(visual, [1, 2])
    visual[0, 0] = 5.0
    assert sequence.visual_embeddings[0, 0] == 1.0
    with pytest.raises(ValueError):
        sequence.visual_embeddings[0, 0] = 2.0
    assert sequence == InputSequence(np.ones((2, 4)), [1, 2])
    assert hash(sequence) == hash(InputSequence(np.ones((2, 4)), [1, 2]))
    assert sequence.fingerprint() != sequence.with_text([1, 3]).fingerprint()
