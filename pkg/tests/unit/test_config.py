import os

import pytest
from pytest import MonkeyPatch

from emocircuit.circuit import GradientMode
from emocircuit.config import DEFAULT_N_PAIRS, DEFAULT_TAU, RunConfig
from emocircuit.exceptions import ModelConfigError
from emocircuit.model import ModelConfig
from emocircuit.veena import VeeMode


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch: MonkeyPatch) -> None:
    for name in list(os.environ):
        if name.startswith("EMC_"):
            monkeypatch.delenv(name)


@pytest.mark.unit
def test_config_defaults() -> None:
    config = RunConfig()
    assert config.model == ModelConfig()
    assert config.seed == 0
    assert config.data_seed == 1
    assert config.tau == DEFAULT_TAU
    assert config.n_pairs == DEFAULT_N_PAIRS
    assert config.l_emo == config.model.aggregate_end
    assert config.gradient_mode is GradientMode.EXACT
    assert config.vee_mode is VeeMode.MULTIPLICATIVE
    assert config.dataset_path is None


@pytest.mark.unit
def test_config_env(monkeypatch: MonkeyPatch) -> None:
    monkeypatch.setenv("EMC_SEED", "7")
    monkeypatch.setenv("EMC_BETA", "3.5")
    monkeypatch.setenv("EMC_SHOW_PROGRESS", "yes")
    monkeypatch.setenv("EMC_GRADIENT_MODE", "TRUNCATED")
    monkeypatch.setenv("EMC_MODEL", '{"n_layers": 6, "adapt_end": 1, "aggregate_end": 3}')
    monkeypatch.setenv("EMC_DATASET", "data/pairs")
    config = RunConfig()
    assert config.seed == 7
    assert config.data_seed == 8
    assert config.beta == 3.5
    assert config.show_progress is True
    assert config.gradient_mode is GradientMode.TRUNCATED
    assert config.model.n_layers == 6
    assert config.l_emo == 3
    assert config.dataset_path == "data/pairs"


@pytest.mark.unit
def test_explicit_values_override_environment(monkeypatch: MonkeyPatch) -> None:
    monkeypatch.setenv("EMC_TAU", "0.9")
    monkeypatch.setenv("EMC_WORKERS", "8")
    monkeypatch.setenv("EMC_DATASET", "data/pairs")
    config = RunConfig(tau=0.25, workers=2, dataset_path=None)
    assert config.tau == 0.25
    assert config.workers == 2
    assert config.dataset_path is None


@pytest.mark.unit
@pytest.mark.parametrize(
    ("env", "value", "message"),
    [
        ("EMC_SEED", "seven", "EMC_SEED must be an integer"),
        ("EMC_ALPHA", "strong", "EMC_ALPHA must be a number"),
        ("EMC_VEE_MODE", "subtractive", "EMC_VEE_MODE must be one of"),
        ("EMC_MODEL", "{", "EMC_MODEL must be a valid JSON object"),
    ],
)
def test_invalid_environment_values_name_their_source(
    monkeypatch: MonkeyPatch, env: str, value: str, message: str
) -> None:
    monkeypatch.setenv(env, value)
    with pytest.raises(ValueError, match=message):
        RunConfig()


@pytest.mark.unit
@pytest.mark.parametrize(
    "kwargs",
    [
        {"tau": 1.5},
        {"beta": 0.5},
        {"gamma": 0.0},
        {"l_emo": 12},
        {"l_emo": -2},
        {"k_head": -1},
        {"n_pairs": 0},
        {"n_probes": 0},
        {"max_new_tokens": 0},
        {"head_pairs": 0},
        {"attribution_pairs": 0},
        {"workers": 0},
        {"seed": -1},
        {"seed": True},
        {"output_dir": 3},
    ],
)
def test_invalid_values_are_rejected(kwargs: dict) -> None:
    with pytest.raises(ValueError):
        RunConfig(**kwargs)


@pytest.mark.unit
def test_with_overrides_moves_the_derived_data_seed() -> None:
    config = RunConfig(seed=3)
    assert config.data_seed == 4
    assert config.with_overrides(seed=10).data_seed == 11
    pinned = RunConfig(seed=3, data_seed=100)
    assert pinned.with_overrides(seed=10).data_seed == 100
    assert config.with_overrides(workers=None).workers == config.workers


@pytest.mark.unit
def test_round_trip_through_json(tmp_path) -> None:
    config = RunConfig(seed=5, vee_mode="additive", model={"n_layers": 6, "adapt_end": 1, "aggregate_end": 3})
    loaded = RunConfig.from_json(config.save(tmp_path / "config.json"))
    assert loaded.to_dict() == config.to_dict()


@pytest.mark.unit
def test_from_dict_rejects_unknown_fields() -> None:
    with pytest.raises(ValueError, match="lr"):
        RunConfig.from_dict({"seed": 1, "lr": 0.1})
    with pytest.raises(ModelConfigError):
        RunConfig(model={"n_layers": 6, "width": 3})
