import warnings
from functools import cached_property
from pathlib import Path
from typing import Any

import pandas as pd

from emocircuit.circuit import (
    FLOWS,
    Head,
    HeadScore,
    KnockoutRecovery,
    NeuronScore,
    head_frame,
    head_intersection,
    keyword_frequency_grid,
    knockout_recovery,
    logit_lens_layers,
    logit_lens_visual,
    neuron_frame,
    phase_grid,
    random_heads,
    rank_heads,
    saliency,
    top_heads,
    trace_neurons,
)
from emocircuit.config import RunConfig
from emocircuit.eval import (
    DecodedSample,
    EvalReport,
    HitRateEvaluator,
    default_lexicon,
    default_wheels,
    evaluate_decodes,
)
from emocircuit.exceptions import AnalysisSplitUnfilteredWarning, DatasetFormatError, WeightFormatError
from emocircuit.harness._data import (
    Dataset,
    ProbeSet,
    gen_dataset,
    gen_probe_set,
    load_dataset,
    neutral_inputs,
    save_dataset,
)
from emocircuit.harness._plant import PlantedModel, PlantSet, build_planted_model, default_plants
from emocircuit.harness._report import emit_report, write_table
from emocircuit.model import CaptureFilter, ModelBundle, forward, load_weights, save_weights
from emocircuit.numerics import derive_seed
from emocircuit.steering import (
    ContrastivePair,
    LayerScan,
    SteeringSet,
    aggregate_steering,
    layer_scan,
    pairs_for,
    save_steering,
    split_pairs,
)
from emocircuit.utils.canonical import write_canonical
from emocircuit.utils.sweep import sweep_map
from emocircuit.veena import (
    InterventionSpec,
    SelectionAblation,
    SideEffectAudit,
    aggregate_critical_sets,
    run_veena,
    save_spec,
    selection_ablation,
    side_effect_audit,
    write_provenance,
)

# Fields that change how a run executes but not what it writes.
EXECUTION_FIELDS = frozenset({"workers", "show_progress", "output_dir"})
# Per emotion: probes behind each selection-ablation entry, neutral inputs of the side-effect audit.
SELECTION_PROBES = 10
SIDE_EFFECT_INPUTS = 10


class Pipeline:
    """
    The discovery and intervention pipeline over one planted model.

    Stages are computed lazily and cached, so a sub-command only pays for the stages it
    depends on. The `write_*` methods write one stage's reports under `config.output_dir`
    and return a short summary mapping.
    """

    def __init__(self, config: RunConfig | dict | None = None):
        """
        Args:
            config: RunConfig instance or dict. If not provided, configuration is loaded from
                environment variables and defaults.

        Raises:
            TypeError: If config is not a dict, RunConfig, or None.
        """
        if config is None:
            config_obj = RunConfig()
        elif isinstance(config, dict):
            config_obj = RunConfig(**config)
        elif isinstance(config, RunConfig):
            config_obj = config
        else:
            raise TypeError(f"config must be a dict, RunConfig, or None, got {type(config)}")
        self.config = config_obj
        self.output_dir = Path(self.config.output_dir)
        self.lexicon = default_lexicon()
        self.wheels = default_wheels()
        self.evaluator = HitRateEvaluator(self.lexicon, self.wheels, self.config.max_new_tokens)

    @property
    def _sweep(self) -> dict[str, Any]:
        return {"workers": self.config.workers, "show_progress": self.config.show_progress}

    # Model and data

    @cached_property
    def plants(self) -> PlantSet:
        return default_plants(self.config.model, self.lexicon, self.config.seed)

    @cached_property
    def planted(self) -> PlantedModel | None:
        """The built planted model, or None when weights were loaded from `weights_path`."""
        if self.config.weights_path is not None:
            return None
        return build_planted_model(self.config.model, self.plants, self.config.seed)

    @cached_property
    def bundle(self) -> ModelBundle:
        planted = self.planted
        if planted is not None:
            return planted.bundle
        bundle = load_weights(str(self.config.weights_path))
        if bundle.config != self.config.model:
            raise WeightFormatError(f"weights were saved for {bundle.config}, run configured for {self.config.model}")
        return bundle

    @cached_property
    def dataset(self) -> Dataset:
        if self.config.dataset_path is None:
            return gen_dataset(self.config.data_seed, 2 * self.config.n_pairs, self.plants, self.config.model)
        dataset = load_dataset(self.config.dataset_path)
        if dataset.config != self.config.model:
            raise DatasetFormatError(
                f"dataset was generated for {dataset.config}, run configured for {self.config.model}"
            )
        return dataset

    @cached_property
    def split(self) -> tuple[list[ContrastivePair], list[ContrastivePair]]:
        """Extraction and analysis halves of the dataset; only extraction is filtered by tau."""
        warnings.warn(
            "the analysis split is not filtered by tau; head and neuron scores average unfiltered analysis pairs",
            AnalysisSplitUnfilteredWarning,
            stacklevel=2,
        )
        return split_pairs(self.dataset.pairs, self.config.n_pairs)

    @property
    def emotions(self) -> tuple[str, ...]:
        return self.dataset.emotions

    def analysis_pairs(self, emotion: str, n: int | None = None) -> list[ContrastivePair]:
        pairs = pairs_for(self.split[1], emotion)
        return pairs if n is None else pairs[:n]

    @cached_property
    def probes(self) -> ProbeSet:
        return gen_probe_set(self.config.data_seed, self.config.n_probes, self.plants, self.config.model)

    # Discovery

    @cached_property
    def steering(self) -> dict[str, SteeringSet]:
        extraction = self.split[0]
        return {
            emotion: aggregate_steering(
                self.bundle, extraction, emotion, self.config.tau, self.evaluator, **self._sweep
            )
            for emotion in self.emotions
        }

    @cached_property
    def scans(self) -> dict[str, LayerScan]:
        return {
            emotion: layer_scan(
                self.bundle,
                self.steering[emotion],
                self.probes.for_emotion(emotion),
                self.config.alpha,
                self.evaluator,
                **self._sweep,
            )
            for emotion in self.emotions
        }

    @property
    def critical_layers(self) -> dict[str, int]:
        return {emotion: scan.peak_layer for emotion, scan in self.scans.items()}

    @cached_property
    def head_scores(self) -> dict[str, list[HeadScore]]:
        return {
            emotion: rank_heads(
                self.bundle,
                self.analysis_pairs(emotion, self.config.head_pairs),
                self.critical_layers[emotion],
                self.steering[emotion],
                emotion=emotion,
                **self._sweep,
            )
            for emotion in self.emotions
        }

    @cached_property
    def neuron_scores(self) -> dict[str, dict[Head, list[NeuronScore]]]:
        return {
            emotion: trace_neurons(
                self.bundle,
                self.analysis_pairs(emotion),
                top_heads(self.head_scores[emotion], self.config.k_head),
                self.config.k_neuron,
                self.critical_layers[emotion],
                self.steering[emotion],
                mode=self.config.gradient_mode,
                max_pairs=self.config.attribution_pairs,
                **self._sweep,
            )
            for emotion in self.emotions
        }

    # Intervention

    @cached_property
    def spec(self) -> InterventionSpec:
        heads, neurons = aggregate_critical_sets(
            self.head_scores, self.neuron_scores, self.config.k_head, self.config.k_neuron
        )
        spec = InterventionSpec(
            c_head=heads,
            c_neuron=neurons,
            beta=self.config.beta,
            gamma=self.config.gamma,
            l_emo=self.config.l_emo,
            mode=self.config.vee_mode,
        )
        spec.validate(self.bundle.config)
        return spec

    @cached_property
    def evaluations(self) -> tuple[EvalReport, EvalReport]:
        """Decodes of the probe set without and with VEENA."""
        probes = self.probes.probes
        max_new = self.config.max_new_tokens
        baseline_tokens = sweep_map(
            lambda probe: self.evaluator.decode(self.bundle, probe.input),
            probes,
            **self._sweep,
            desc="Baseline decodes",
        )
        veena_tokens = sweep_map(
            lambda probe: run_veena(self.bundle, probe.input, self.spec, max_new).tokens,
            probes,
            **self._sweep,
            desc="VEENA decodes",
        )
        baseline = evaluate_decodes(
            [DecodedSample(p.probe_id, p.emotion, t) for p, t in zip(probes, baseline_tokens, strict=True)],
            self.lexicon,
            self.wheels,
            metadata={"intervention": "none"},
        )
        veena = evaluate_decodes(
            [DecodedSample(p.probe_id, p.emotion, t) for p, t in zip(probes, veena_tokens, strict=True)],
            self.lexicon,
            self.wheels,
            baseline_hit_rate=baseline.mean_hit_rate,
            metadata={"intervention": "veena", "n_heads": len(self.spec.c_head), "n_neurons": len(self.spec.c_neuron)},
        )
        return baseline, veena

    @cached_property
    def selection(self) -> SelectionAblation:
        return selection_ablation(
            self.bundle,
            self.probes.by_emotion(SELECTION_PROBES),
            self.head_scores,
            self.neuron_scores,
            self.spec,
            self.evaluator,
            seed=derive_seed(self.config.seed, "selection"),
            **self._sweep,
        )

    @cached_property
    def side_effects(self) -> SideEffectAudit:
        neutral = [
            x for emotion in self.emotions for x in neutral_inputs(self.analysis_pairs(emotion), SIDE_EFFECT_INPUTS)
        ]
        return side_effect_audit(self.bundle, neutral, self.spec, self.lexicon, max_new=self.config.max_new_tokens)

    # Writers

    def _path(self, *parts: str) -> Path:
        return self.output_dir.joinpath(*parts)

    def write_model(self) -> dict[str, Any]:
        bundle = self.bundle
        save_weights(bundle, self._path("model", "weights.emc"))
        report: dict[str, Any] = {"model": bundle.config.to_dict(), "plants": self.plants.to_dict()}
        if self.planted is not None:
            report.update(self.planted.to_dict())
        emit_report(report, self._path("model", "planted.json"))
        return {"attempts": None if self.planted is None else self.planted.attempts}

    def write_dataset(self) -> dict[str, Any]:
        save_dataset(self.dataset, self._path("data", "pairs"))
        emit_report(self.probes, self._path("data", "probes.json"))
        return {"pairs": len(self.dataset), "probes": len(self.probes.probes)}

    def write_steering(self) -> dict[str, Any]:
        for emotion, steering in self.steering.items():
            save_steering(steering, self._path("steering", f"{emotion}.emm"))
        summary = {emotion: steering.n_valid for emotion, steering in self.steering.items()}
        emit_report({"tau": self.config.tau, "valid_pairs": summary}, self._path("steering", "summary.json"))
        return {"valid_pairs": summary}

    def write_layer_scans(self) -> dict[str, Any]:
        for emotion, scan in self.scans.items():
            emit_report(scan, self._path("steering", f"scan_{emotion}.json"))
        return {"critical_layers": self.critical_layers}

    def write_heads(self) -> dict[str, Any]:
        for emotion, scores in self.head_scores.items():
            report = {
                "emotion": emotion,
                "critical_layer": self.critical_layers[emotion],
                "analysis_split": "unfiltered",
                "scores": scores,
            }
            path = emit_report(report, self._path("heads", f"{emotion}.json"))
            write_table(head_frame(scores), path.with_suffix(".csv"))
        if len(self.head_scores) >= 2:
            intersection = head_intersection(self.head_scores, self.config.k_head)
            emit_report(intersection, self._path("heads", "intersection.json"))
        return {"top_heads": {e: top_heads(s, 1) for e, s in self.head_scores.items()}}

    def write_neurons(self) -> dict[str, Any]:
        top: dict[str, list[list[int]]] = {}
        for emotion, per_head in self.neuron_scores.items():
            scores = [score for head in sorted(per_head) for score in per_head[head]]
            report = {
                "emotion": emotion,
                "gradient_mode": self.config.gradient_mode.value,
                "attribution_pairs": self.config.attribution_pairs,
                "scores": scores,
            }
            path = emit_report(report, self._path("neurons", f"{emotion}.json"))
            write_table(neuron_frame(scores), path.with_suffix(".csv"))
            best = max(scores, key=lambda s: (abs(s.score), -s.layer, -s.neuron), default=None)
            top[emotion] = [] if best is None else [[best.layer, best.neuron]]
        return {"top_neurons": top}

    def write_saliency(self) -> dict[str, Any]:
        peaks: dict[str, dict[str, int]] = {}
        for emotion in self.emotions:
            pair = self.analysis_pairs(emotion, 1)[0]
            result = saliency(self.bundle, pair, self.critical_layers[emotion], self.steering[emotion], side="positive")
            emit_report(result, self._path("circuit", f"saliency_{emotion}.json"))
            peaks[emotion] = {name: result.peak_layer(name) for name in FLOWS}
        return {"peak_layers": peaks}

    def write_logit_lens(self) -> dict[str, Any]:
        entropy: dict[str, float] = {}
        for emotion in self.emotions:
            report = logit_lens_layers(self.bundle, self.steering[emotion], lexicon=self.lexicon)
            emit_report(report, self._path("circuit", f"lens_{emotion}.json"))
            pair = self.analysis_pairs(emotion, 1)[0]
            _, trace = forward(self.bundle, pair.x_plus, CaptureFilter(residual=True))
            position = 0 if pair.visual_pos is None else pair.visual_pos
            visual = logit_lens_visual(self.bundle, trace, [position], self.lexicon)
            emit_report(visual, self._path("circuit", f"lens_visual_{emotion}.json"))
            entropy[emotion] = report.at(self.critical_layers[emotion]).entropy
        return {"critical_layer_entropy": entropy}

    def write_phase_patch(self) -> dict[str, Any]:
        n = self.config.attribution_pairs
        pairs = [pair for emotion in self.emotions for pair in self.analysis_pairs(emotion, n)]
        cells = phase_grid(self.bundle, pairs, self.evaluator, workers=self.config.workers)
        phases = [self.bundle.config.phase_of(cell.layers.start).value if cell.layers else "empty" for cell in cells]
        frame = pd.DataFrame(
            [{"phase": phase, **cell.to_dict()} for phase, cell in zip(phases, cells, strict=True)],
            columns=["phase", "role", "layers", "baseline_hit_rate", "patched_hit_rate", "delta"],
        )
        path = emit_report({"cells": frame.to_dict(orient="records")}, self._path("circuit", "phase_patch.json"))
        write_table(frame.drop(columns=["layers"]), path.with_suffix(".csv"))
        grid = keyword_frequency_grid(
            self.bundle,
            pairs,
            sorted(self.lexicon.all_tokens()),
            max_new=self.config.max_new_tokens,
            workers=self.config.workers,
        )
        emit_report(grid, self._path("circuit", "keyword_grid.json"))
        peak_roles: dict[str, str] = {}
        for phase in dict.fromkeys(phases):
            candidates = [cell for name, cell in zip(phases, cells, strict=True) if name == phase]
            peak_roles[phase] = max(candidates, key=lambda cell: cell.delta).role.value
        return {"peak_roles": peak_roles}

    def knockout(self, emotion: str) -> KnockoutRecovery:
        heads = top_heads(self.head_scores[emotion], self.config.k_head)
        excluded = set(heads) | self.plants.planted_heads
        config = self.bundle.config
        available = config.n_layers * config.n_heads - len(excluded)
        control = random_heads(
            config, min(len(heads), available), derive_seed(self.config.seed, "knockout", emotion), exclude=excluded
        )
        return knockout_recovery(
            self.bundle,
            self.analysis_pairs(emotion, self.config.attribution_pairs),
            heads,
            self.evaluator,
            control_heads=control,
            workers=self.config.workers,
        )

    def write_knockout(self) -> dict[str, Any]:
        results = {emotion: self.knockout(emotion) for emotion in self.emotions}
        frame = pd.DataFrame(
            [
                {
                    "emotion": r.emotion,
                    "emotional": r.emotional,
                    "neutral": r.neutral,
                    "knocked_out": r.knocked_out,
                    "control": r.control,
                    "recovered": r.recovered,
                }
                for r in results.values()
            ],
            columns=["emotion", "emotional", "neutral", "knocked_out", "control", "recovered"],
        )
        path = emit_report({"results": results}, self._path("circuit", "knockout.json"))
        write_table(frame, path.with_suffix(".csv"))
        return {"recovery_fraction": {e: r.recovery_fraction for e, r in results.items()}}

    def write_veena(self) -> dict[str, Any]:
        save_spec(self.spec, self._path("veena", "spec.json"))
        for emotion in self.emotions:
            probe = next(p for p in self.probes.probes if p.emotion == emotion)
            result = run_veena(self.bundle, probe.input, self.spec, self.config.max_new_tokens)
            write_provenance(result.provenance, self._path("veena", "provenance", f"{emotion}.jsonl"))
        emit_report(self.selection, self._path("veena", "selection.json"))
        emit_report(self.side_effects, self._path("veena", "side_effects.json"))
        return {
            "heads": len(self.spec.c_head),
            "neurons": len(self.spec.c_neuron),
            "side_effect_delta": self.side_effects.delta,
        }

    def write_eval(self) -> dict[str, Any]:
        baseline, veena = self.evaluations
        emit_report(baseline, self._path("eval", "baseline.json"))
        emit_report(veena, self._path("eval", "veena.json"))
        return {"baseline_hit_rate": baseline.mean_hit_rate, "veena_hit_rate": veena.mean_hit_rate}

    def run(self) -> dict[str, Any]:
        """Every stage in order; the summary is also written to `summary.json`."""
        summary = {
            "model": self.write_model(),
            "data": self.write_dataset(),
            "steering": self.write_steering(),
            "layer_scan": self.write_layer_scans(),
            "heads": self.write_heads(),
            "neurons": self.write_neurons(),
            "saliency": self.write_saliency(),
            "logit_lens": self.write_logit_lens(),
            "phase_patch": self.write_phase_patch(),
            "knockout": self.write_knockout(),
            "veena": self.write_veena(),
            "eval": self.write_eval(),
        }
        config = {key: value for key, value in self.config.to_dict().items() if key not in EXECUTION_FIELDS}
        write_canonical(self._path("summary.json"), {"config": config, **summary})
        return summary


def run_pipeline(config: RunConfig | dict | None = None) -> dict[str, Any]:
    """Run the full pipeline and return its summary."""
    return Pipeline(config).run()
