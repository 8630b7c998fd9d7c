import numpy as np
import pytest

from emocircuit.eval import EmotionWheel, Lexicon, default_lexicon, default_wheels
from emocircuit.harness import PlantedModel, build_planted_model, default_plants
from emocircuit.model import InputSequence, ModelBundle, ModelConfig, init_random
from emocircuit.numerics import seeded_rng
from emocircuit.steering import ContrastivePair


def random_input(config: ModelConfig, seed: int, n_text: int = 4) -> InputSequence:
    """Gaussian visual prefix plus random token ids that fit `config`."""
    rng = seeded_rng(seed)
    visual = rng.standard_normal((config.n_visual, config.d_model))
    tokens = rng.integers(config.vocab_size, size=n_text)
    return InputSequence(visual, tokens.tolist())


def shifted_pair(config: ModelConfig, seed: int, *, emotion: str = "happy", position: int = 1) -> ContrastivePair:
    """Pair whose positive side adds a random direction to one visual row of the negative side."""
    negative = random_input(config, seed)
    rng = seeded_rng(seed + 1000)
    visual = negative.visual_embeddings.copy()
    visual[position] += 2.0 * rng.standard_normal(config.d_model)
    positive = InputSequence(visual, negative.text_token_ids)
    return ContrastivePair(f"{emotion}-{seed:04d}", emotion, positive, negative, position)


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Three-layer model small enough for exhaustive checks."""
    return ModelConfig(
        n_layers=3,
        n_heads=2,
        d_model=8,
        d_mlp=16,
        vocab_size=40,
        n_visual=3,
        max_seq=24,
        adapt_end=0,
        aggregate_end=1,
    )


@pytest.fixture
def tiny_bundle(tiny_config: ModelConfig) -> ModelBundle:
    return init_random(tiny_config, 0)


@pytest.fixture
def tiny_input(tiny_config: ModelConfig) -> InputSequence:
    return random_input(tiny_config, 7)


@pytest.fixture
def tiny_pair(tiny_config: ModelConfig) -> ContrastivePair:
    return shifted_pair(tiny_config, 11)


@pytest.fixture
def lexicon() -> Lexicon:
    return default_lexicon()


@pytest.fixture
def wheels() -> tuple[EmotionWheel, ...]:
    return default_wheels()


@pytest.fixture(scope="session")
def planted() -> PlantedModel:
    """Default-size model with one planted pathway per lexicon emotion."""
    config = ModelConfig()
    return build_planted_model(config, default_plants(config, default_lexicon(), 0), 0)


def assert_close(actual: np.ndarray, expected: np.ndarray, *, atol: float = 1e-9) -> None:
    np.testing.assert_allclose(actual, expected, rtol=0.0, atol=atol)
