"""Unit tests for Emotional Intention, Latent Restoration and head ranking."""

import warnings

import numpy as np
import pytest

from emocircuit.circuit import (
    HeadScore,
    RestorationContext,
    Target,
    emotional_intention,
    head_frame,
    latent_restoration,
    rank_heads,
    scored_heads,
    source_token,
    top_heads,
)
from emocircuit.exceptions import DegenerateContrastError, DegeneratePairsSkippedWarning
from emocircuit.model import ActivationTrace, InputSequence, ModelBundle, ModelConfig
from emocircuit.steering import ContrastivePair
from tests.conftest import shifted_pair


def _vector(config: ModelConfig, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(config.d_model)


@pytest.mark.unit
def test_emotional_intention_is_a_cosine() -> None:
    assert emotional_intention(np.array([2.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 / np.sqrt(2))


@pytest.mark.unit
def test_patching_every_head_of_the_critical_layer_restores_fully(
    tiny_bundle: ModelBundle, tiny_pair: ContrastivePair
) -> None:
    vector = _vector(tiny_bundle.config)
    score = latent_restoration(tiny_bundle, tiny_pair.x_plus, tiny_pair.x_minus, [(2, 0), (2, 1)], 2, vector)
    assert score == pytest.approx(1.0, abs=1e-9)


@pytest.mark.unit
def test_restoration_of_no_heads_is_zero(tiny_bundle: ModelBundle, tiny_pair: ContrastivePair) -> None:
    context = RestorationContext.for_pair(tiny_bundle, tiny_pair, 2, _vector(tiny_bundle.config))
    assert context.restoration([]) == 0.0
    assert context.metric(context.intention_plus) == pytest.approx(1.0)
    assert context.metric(context.intention_minus) == 0.0


@pytest.mark.unit
def test_single_head_forms_match(tiny_bundle: ModelBundle, tiny_pair: ContrastivePair) -> None:
    vector = _vector(tiny_bundle.config)
    single = latent_restoration(tiny_bundle, tiny_pair.x_plus, tiny_pair.x_minus, (1, 0), 2, vector)
    listed = latent_restoration(tiny_bundle, tiny_pair.x_plus, tiny_pair.x_minus, [(1, 0)], 2, vector)
    assert single == listed


@pytest.mark.unit
def test_restoration_rejects_heads_outside_the_window(tiny_bundle: ModelBundle, tiny_pair: ContrastivePair) -> None:
    context = RestorationContext.for_pair(tiny_bundle, tiny_pair, 1, _vector(tiny_bundle.config))
    with pytest.raises(IndexError):
        context.restoration([(2, 0)])
    with pytest.raises(IndexError):
        context.restoration([(0, 2)])
    with pytest.raises(IndexError):
        RestorationContext.for_pair(tiny_bundle, tiny_pair, 3, _vector(tiny_bundle.config))


@pytest.mark.unit
def test_identical_sides_are_degenerate(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    with pytest.raises(DegenerateContrastError):
        latent_restoration(tiny_bundle, tiny_input, tiny_input, (0, 0), 2, _vector(tiny_bundle.config))


@pytest.mark.unit
def test_scored_heads_lie_strictly_upstream(tiny_bundle: ModelBundle) -> None:
    assert scored_heads(tiny_bundle, 2) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert scored_heads(tiny_bundle, 2, max_layer=1) == [(0, 0), (0, 1)]


@pytest.mark.unit
def test_rank_heads_sorts_descending_and_ignores_workers(
    tiny_bundle: ModelBundle, tiny_config: ModelConfig
) -> None:
    pairs = [shifted_pair(tiny_config, seed) for seed in range(3)]
    vector = _vector(tiny_config)
    serial = rank_heads(tiny_bundle, pairs, 2, vector)
    threaded = rank_heads(tiny_bundle, pairs, 2, vector, workers=4)
    assert serial == threaded
    values = [s.score for s in serial]
    assert values == sorted(values, reverse=True)
    assert {s.key for s in serial} == set(scored_heads(tiny_bundle, 2))
    assert all(s.emotion == "happy" and s.n_pairs == 3 and s.n_skipped == 0 for s in serial)


@pytest.mark.unit
def test_rank_heads_mean_matches_single_pair_scores(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    pairs = [shifted_pair(tiny_config, seed) for seed in range(2)]
    vector = _vector(tiny_config)
    ranked = {s.key: s.score for s in rank_heads(tiny_bundle, pairs, 2, vector)}
    expected = sum(latent_restoration(tiny_bundle, p.x_plus, p.x_minus, (1, 1), 2, vector) for p in pairs) / 2
    assert ranked[(1, 1)] == pytest.approx(expected, abs=1e-12)


@pytest.mark.unit
def test_final_layer_target_scores_every_lower_head(tiny_bundle: ModelBundle, tiny_pair: ContrastivePair) -> None:
    vector = _vector(tiny_bundle.config)
    critical = rank_heads(tiny_bundle, [tiny_pair], 1, vector)
    final = rank_heads(tiny_bundle, [tiny_pair], 1, vector, target="final_layer")
    assert len(critical) == 2
    assert len(final) == 4
    assert all(s.target is Target.FINAL_LAYER for s in final)


@pytest.mark.unit
def test_degenerate_pairs_are_skipped_with_a_warning(
    tiny_bundle: ModelBundle, tiny_input: InputSequence, tiny_pair: ContrastivePair
) -> None:
    same = ContrastivePair("happy-9999", "happy", tiny_input, tiny_input)
    with pytest.warns(DegeneratePairsSkippedWarning, match="1 of 2"):
        scores = rank_heads(tiny_bundle, [tiny_pair, same], 2, _vector(tiny_bundle.config))
    assert all(s.n_skipped == 1 and s.score is not None for s in scores)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneratePairsSkippedWarning)
        empty = rank_heads(tiny_bundle, [same], 2, _vector(tiny_bundle.config))
    assert all(s.skipped for s in empty)
    assert top_heads(empty, 3) == []


@pytest.mark.unit
def test_rank_heads_needs_pairs(tiny_bundle: ModelBundle) -> None:
    with pytest.raises(ValueError):
        rank_heads(tiny_bundle, [], 2, _vector(tiny_bundle.config))


@pytest.mark.unit
def test_top_heads_skips_unscored_entries() -> None:
    scores = [
        HeadScore(1, 0, 0.9, "sad", Target.CRITICAL_LAYER, 2, 0),
        HeadScore(0, 1, 0.2, "sad", Target.CRITICAL_LAYER, 2, 0),
        HeadScore(0, 0, None, "sad", Target.CRITICAL_LAYER, 2, 2),
    ]
    assert top_heads(scores, 5) == [(1, 0), (0, 1)]
    frame = head_frame(scores)
    assert list(frame.columns) == ["layer", "head", "score", "emotion", "target", "n_pairs", "n_skipped"]
    assert frame["target"].tolist() == ["critical_layer"] * 3


@pytest.mark.unit
def test_source_token_picks_the_strongest_cell(tiny_config: ModelConfig) -> None:
    raw = np.zeros((4, 4))
    raw[2, 1] = 10.0
    raw[3, 0] = 20.0
    trace = ActivationTrace(tiny_config, "x", 4, {"scores": {(0, 0): raw}})
    assert source_token(trace, (0, 0)) == 0
    assert source_token(trace, (0, 0), query_rows=[1, 2]) == 1
    assert source_token(trace, (0, 0), 2) == 1
