import pytest

from emocircuit.eval import default_lexicon
from emocircuit.harness import PlantSet, default_plants
from emocircuit.model import ModelConfig


@pytest.fixture
def small_config() -> ModelConfig:
    """Smallest layout that still hosts one plant per lexicon emotion."""
    return ModelConfig(
        n_layers=4,
        n_heads=2,
        d_model=16,
        d_mlp=8,
        vocab_size=40,
        n_visual=3,
        max_seq=16,
        adapt_end=1,
        aggregate_end=2,
    )


@pytest.fixture
def small_plants(small_config: ModelConfig) -> PlantSet:
    return default_plants(small_config, default_lexicon(), 0)
