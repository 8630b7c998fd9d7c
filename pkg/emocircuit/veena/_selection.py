from collections.abc import Collection, Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd

from emocircuit.circuit import HeadScore, NeuronScore, keyword_frequency_probe, random_heads, random_neurons, top_heads
from emocircuit.eval import Lexicon
from emocircuit.model import InputSequence, ModelBundle
from emocircuit.steering import Evaluator
from emocircuit.utils.sweep import sweep_map
from emocircuit.veena._intervention import Head, InterventionSpec, Neuron

HEAD_SCALES = (5, 10, 20, 30)
NEURON_SCALES = (10, 20, 30, 40)
RANDOM_HEADS = 10
RANDOM_NEURONS = 30


def _neuron_ranking(scores: Mapping[Head, Sequence[NeuronScore]] | Sequence[NeuronScore]) -> list[Neuron]:
    """Distinct neurons by descending |G|; a neuron reached from several heads keeps its best score."""
    flat: Iterable[NeuronScore] = (
        (s for per_head in scores.values() for s in per_head) if isinstance(scores, Mapping) else scores
    )
    best: dict[Neuron, float] = {}
    for score in flat:
        key = (score.layer, score.neuron)
        best[key] = max(best.get(key, 0.0), abs(score.score))
    return sorted(best, key=lambda key: (-best[key], key))


def aggregate_critical_sets(
    head_scores: Mapping[str, Sequence[HeadScore]],
    neuron_scores: Mapping[str, Mapping[Head, Sequence[NeuronScore]] | Sequence[NeuronScore]],
    k_head: int = 10,
    k_neuron: int = 30,
) -> tuple[frozenset[Head], frozenset[Neuron]]:
    """
    Union over emotions of the per-emotion top-`k_head` heads and top-`k_neuron` neurons.

    Head rankings are the output of `rank_heads`; neuron scores are either the per-head
    output of `trace_neurons` or a flat list.
    """
    heads: set[Head] = set()
    for scores in head_scores.values():
        heads.update(top_heads(scores, k_head))
    neurons: set[Neuron] = set()
    for scores in neuron_scores.values():
        neurons.update(_neuron_ranking(scores)[:k_neuron])
    return frozenset(heads), frozenset(neurons)


def mean_hit_rate(
    bundle: ModelBundle,
    probes: Mapping[str, Sequence[InputSequence]],
    evaluator: Evaluator,
    spec: InterventionSpec | None = None,
    *,
    workers: int = 1,
) -> float:
    """Hit rate averaged over every (emotion, probe), with `spec` active when given."""
    work = [(emotion, x) for emotion in sorted(probes) for x in probes[emotion]]
    if not work:
        return 0.0
    rates = sweep_map(lambda item: evaluator(bundle, item[1], item[0], intervention=spec), work, workers=workers)
    return float(np.mean(rates))


@dataclass(frozen=True)
class SelectionEntry:
    family: str
    k: int
    random: bool
    hit_rate: float
    baseline: float

    @property
    def label(self) -> str:
        kind = "Random" if self.random else "Top"
        return f"{kind}-{self.k} {self.family}s"

    @property
    def delta(self) -> float:
        return self.hit_rate - self.baseline


@dataclass(frozen=True)
class SelectionAblation:
    baseline: float
    entries: tuple[SelectionEntry, ...]

    def entry(self, family: str, k: int, *, random: bool = False) -> SelectionEntry:
        for item in self.entries:
            if (item.family, item.k, item.random) == (family, k, random):
                return item
        raise KeyError((family, k, random))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "label": e.label,
                    "family": e.family,
                    "k": e.k,
                    "random": e.random,
                    "hit_rate": e.hit_rate,
                    "delta": e.delta,
                }
                for e in self.entries
            ],
            columns=["label", "family", "k", "random", "hit_rate", "delta"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline_hit_rate": self.baseline,
            "entries": [
                {"label": e.label, "family": e.family, "k": e.k, "random": e.random, "hit_rate": e.hit_rate}
                for e in self.entries
            ],
        }


def selection_ablation(
    bundle: ModelBundle,
    probes: Mapping[str, Sequence[InputSequence]],
    head_scores: Mapping[str, Sequence[HeadScore]],
    neuron_scores: Mapping[str, Mapping[Head, Sequence[NeuronScore]] | Sequence[NeuronScore]],
    spec: InterventionSpec,
    evaluator: Evaluator,
    *,
    head_scales: Sequence[int] = HEAD_SCALES,
    neuron_scales: Sequence[int] = NEURON_SCALES,
    random_heads_k: int = RANDOM_HEADS,
    random_neurons_k: int = RANDOM_NEURONS,
    seed: int = 0,
    workers: int = 1,
    show_progress: bool = False,
) -> SelectionAblation:
    """
    Hit rate of VEENA as the size of one critical set varies.

    Each head selection replaces `spec.c_head` and keeps `spec.c_neuron`, and vice versa. The
    random controls draw an equal-size set outside the selected components: heads from the
    whole model, neurons from layers below the deepest selected head. Random draws that ask
    for more components than the model has are clipped to what is available, and their entries
    record the clipped size.
    """
    config = bundle.config
    baseline = mean_hit_rate(bundle, probes, evaluator, workers=workers)
    variants: list[tuple[str, int, bool, InterventionSpec]] = []
    for k in head_scales:
        heads, _ = aggregate_critical_sets(head_scores, {}, k, 0)
        variants.append(("head", k, False, spec.replace(c_head=heads)))
    for k in neuron_scales:
        _, neurons = aggregate_critical_sets({}, neuron_scores, 0, k)
        variants.append(("neuron", k, False, spec.replace(c_neuron=neurons)))

    n_heads = config.n_layers * config.n_heads - len(spec.c_head)
    drawn_heads = random_heads(config, min(random_heads_k, n_heads), seed, exclude=spec.c_head)
    variants.append(("head", len(drawn_heads), True, spec.replace(c_head=frozenset(drawn_heads))))
    limit = max((layer for layer, _ in spec.c_head), default=config.n_layers)
    n_neurons = limit * config.d_mlp - sum(1 for layer, _ in spec.c_neuron if layer < limit)
    drawn_neurons = random_neurons(
        config, min(random_neurons_k, n_neurons), seed + 1, exclude=spec.c_neuron, max_layer=limit
    )
    variants.append(("neuron", len(drawn_neurons), True, spec.replace(c_neuron=frozenset(drawn_neurons))))

    rates = sweep_map(
        lambda variant: mean_hit_rate(bundle, probes, evaluator, variant[3]),
        variants,
        workers=workers,
        show_progress=show_progress,
        desc="Selection ablation",
        unit=" selections",
    )
    entries = tuple(
        SelectionEntry(family, k, random, rate, baseline)
        for (family, k, random, _), rate in zip(variants, rates, strict=True)
    )
    return SelectionAblation(baseline, entries)


@dataclass(frozen=True)
class SideEffectAudit:
    """Keyword frequency on neutral inputs with and without the intervention."""

    without: float
    with_veena: float
    n_inputs: int

    @property
    def delta(self) -> float:
        return self.with_veena - self.without

    def to_dict(self) -> dict[str, Any]:
        return {"without": self.without, "with_veena": self.with_veena, "delta": self.delta, "n_inputs": self.n_inputs}


def side_effect_audit(
    bundle: ModelBundle,
    neutral_inputs: Sequence[InputSequence],
    spec: InterventionSpec,
    lexicon: Lexicon,
    *,
    targets: Collection[int] | None = None,
    max_new: int = 8,
) -> SideEffectAudit:
    """
    Does VEENA make neutral inputs emotional?

    Counts continuations naming any lexicon keyword (or `targets`), before and after.
    """
    tokens = sorted(lexicon.all_tokens()) if targets is None else sorted(targets)
    without = keyword_frequency_probe(bundle, neutral_inputs, tokens, max_new=max_new)
    with_veena = keyword_frequency_probe(bundle, neutral_inputs, tokens, intervention=spec, max_new=max_new)
    return SideEffectAudit(without, with_veena, len(neutral_inputs))
