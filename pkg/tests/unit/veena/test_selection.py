"""Unit tests for critical-set aggregation, the selection ablation and the side-effect audit."""

import pytest

from emocircuit.circuit import HeadScore, NeuronScore, Target
from emocircuit.eval import Lexicon
from emocircuit.model import ForwardHooks, InputSequence, Intervention, ModelBundle
from emocircuit.veena import (
    InterventionSpec,
    aggregate_critical_sets,
    mean_hit_rate,
    selection_ablation,
    side_effect_audit,
)


class SizeEvaluator:
    """Hit rate that grows with the size of the active critical sets."""

    def __call__(
        self,
        bundle: ModelBundle,
        input: InputSequence,
        emotion: str,
        *,
        hooks: ForwardHooks | None = None,
        intervention: Intervention | None = None,
    ) -> float:
        if not isinstance(intervention, InterventionSpec):
            return 0.1
        return 0.01 * len(intervention.c_head) + 0.001 * len(intervention.c_neuron)


def _heads(emotion: str, keys: list[tuple[int, int]]) -> list[HeadScore]:
    return [
        HeadScore(layer, head, 1.0 - 0.1 * i, emotion, Target.CRITICAL_LAYER, 3, 0)
        for i, (layer, head) in enumerate(keys)
    ]


HEAD_SCORES = {
    "happy": _heads("happy", [(1, 0), (1, 1), (0, 0)]),
    "sad": _heads("sad", [(1, 0), (2, 0), (0, 1)]),
}
NEURON_SCORES = {
    "happy": [NeuronScore(0, 3, 0.5, (1, 0), 4), NeuronScore(0, 4, -0.9, (1, 0), 4)],
    "sad": [NeuronScore(0, 3, 0.7, (1, 0), 4), NeuronScore(1, 2, 0.1, (2, 0), 4)],
}


@pytest.mark.unit
def test_critical_sets_are_unions_of_per_emotion_tops() -> None:
    heads, neurons = aggregate_critical_sets(HEAD_SCORES, NEURON_SCORES, 1, 1)
    assert heads == {(1, 0)}
    assert neurons == {(0, 4), (0, 3)}
    heads, neurons = aggregate_critical_sets(HEAD_SCORES, NEURON_SCORES, 2, 3)
    assert heads == {(1, 0), (1, 1), (2, 0)}
    assert neurons == {(0, 3), (0, 4), (1, 2)}


@pytest.mark.unit
def test_neurons_reached_from_several_heads_keep_their_best_score() -> None:
    per_head = {
        (1, 0): [NeuronScore(0, 1, 0.2, (1, 0), 3), NeuronScore(0, 2, 0.3, (1, 0), 3)],
        (2, 0): [NeuronScore(0, 1, -0.8, (2, 0), 3)],
    }
    _, neurons = aggregate_critical_sets({}, {"fear": per_head}, 0, 1)
    assert neurons == {(0, 1)}


@pytest.mark.unit
def test_mean_hit_rate(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    probes = {"happy": [tiny_input], "sad": [tiny_input, tiny_input]}
    assert mean_hit_rate(tiny_bundle, probes, SizeEvaluator()) == pytest.approx(0.1)
    spec = InterventionSpec(c_head={(0, 0)}, c_neuron={(0, 1)})
    assert mean_hit_rate(tiny_bundle, probes, SizeEvaluator(), spec, workers=2) == pytest.approx(0.011)
    assert mean_hit_rate(tiny_bundle, {}, SizeEvaluator()) == 0.0


@pytest.mark.unit
def test_selection_ablation_varies_one_family_at_a_time(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    spec = InterventionSpec(c_head={(1, 0)}, c_neuron={(0, 1)}, l_emo=1)
    result = selection_ablation(
        tiny_bundle,
        {"happy": [tiny_input], "sad": [tiny_input]},
        HEAD_SCORES,
        NEURON_SCORES,
        spec,
        SizeEvaluator(),
        head_scales=(1, 2),
        neuron_scales=(1, 3),
        random_heads_k=2,
        random_neurons_k=3,
    )
    assert result.baseline == pytest.approx(0.1)
    assert [e.label for e in result.entries] == [
        "Top-1 heads",
        "Top-2 heads",
        "Top-1 neurons",
        "Top-3 neurons",
        "Random-2 heads",
        "Random-3 neurons",
    ]
    assert result.entry("head", 1).hit_rate == pytest.approx(0.011)
    assert result.entry("head", 2).hit_rate == pytest.approx(0.031)
    assert result.entry("neuron", 1).hit_rate == pytest.approx(0.012)
    assert result.entry("neuron", 3).hit_rate == pytest.approx(0.013)
    assert result.entry("head", 2, random=True).hit_rate == pytest.approx(0.021)
    assert result.entry("neuron", 3, random=True).hit_rate == pytest.approx(0.013)
    assert result.entry("head", 1).delta == pytest.approx(-0.089)
    with pytest.raises(KeyError):
        result.entry("head", 5)
    assert list(result.to_frame().columns) == ["label", "family", "k", "random", "hit_rate", "delta"]


@pytest.mark.unit
def test_clipped_random_draws_record_their_drawn_size(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    # 6 heads minus the selected one; 16 layer-0 neurons minus the selected one
    spec = InterventionSpec(c_head={(1, 0)}, c_neuron={(0, 1)}, l_emo=1)
    result = selection_ablation(
        tiny_bundle,
        {"happy": [tiny_input]},
        HEAD_SCORES,
        NEURON_SCORES,
        spec,
        SizeEvaluator(),
        head_scales=(1,),
        neuron_scales=(1,),
        random_heads_k=9,
        random_neurons_k=40,
    )
    random_entries = [e for e in result.entries if e.random]
    assert [(e.family, e.k) for e in random_entries] == [("head", 5), ("neuron", 15)]
    assert [e.label for e in random_entries] == ["Random-5 heads", "Random-15 neurons"]
    assert result.entry("head", 5, random=True).hit_rate == pytest.approx(0.051)
    assert result.entry("neuron", 15, random=True).hit_rate == pytest.approx(0.025)
    with pytest.raises(KeyError):
        result.entry("head", 9, random=True)


@pytest.mark.unit
def test_side_effect_audit_of_an_inert_spec(
    tiny_bundle: ModelBundle, tiny_input: InputSequence, lexicon: Lexicon
) -> None:
    spec = InterventionSpec(c_head={(0, 0)}, c_neuron={(1, 1)}, beta=1.0, gamma=1.0)
    audit = side_effect_audit(tiny_bundle, [tiny_input], spec, lexicon, max_new=4)
    assert audit.delta == 0.0
    assert audit.n_inputs == 1
    assert audit.to_dict()["with_veena"] == audit.without
