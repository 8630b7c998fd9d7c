"""End-to-end tests: the full pipeline recovers the planted pathway and writes its run directory."""

import pytest

from emocircuit.harness import read_report
from emocircuit.model import TokenRole
from tests.e2e.conftest import PipelineRun

EMOTIONS = ("angry", "fear", "happy", "sad")


@pytest.mark.e2e
def test_run_directory_layout(pipeline_run: PipelineRun) -> None:
    root = pipeline_run.root
    expected = [
        "summary.json",
        "model/weights.emc",
        "model/planted.json",
        "data/pairs.jsonl",
        "data/pairs.bin",
        "data/probes.json",
        "steering/summary.json",
        "heads/intersection.json",
        "circuit/phase_patch.json",
        "circuit/phase_patch.csv",
        "circuit/keyword_grid.json",
        "circuit/knockout.json",
        "veena/spec.json",
        "veena/selection.json",
        "veena/side_effects.json",
        "eval/baseline.json",
        "eval/veena.json",
    ]
    for emotion in EMOTIONS:
        expected += [
            f"steering/{emotion}.emm",
            f"steering/scan_{emotion}.json",
            f"steering/scan_{emotion}.csv",
            f"heads/{emotion}.json",
            f"heads/{emotion}.csv",
            f"neurons/{emotion}.json",
            f"circuit/saliency_{emotion}.json",
            f"circuit/lens_{emotion}.json",
            f"veena/provenance/{emotion}.jsonl",
        ]
    missing = [name for name in expected if not (root / name).is_file()]
    assert missing == []


@pytest.mark.e2e
def test_summary_matches_reports(pipeline_run: PipelineRun) -> None:
    summary = read_report(pipeline_run.root / "summary.json")
    assert not {"output_dir", "workers", "show_progress"} & set(summary["config"])
    assert summary["config"]["n_pairs"] == pipeline_run.pipeline.config.n_pairs
    heads = read_report(pipeline_run.root / "heads" / "happy.json")
    assert heads["analysis_split"] == "unfiltered"
    assert summary["layer_scan"]["critical_layers"]["happy"] == heads["critical_layer"]


@pytest.mark.e2e
@pytest.mark.parametrize("emotion", EMOTIONS)
def test_planted_pathway_recovered(pipeline_run: PipelineRun, emotion: str) -> None:
    pipeline = pipeline_run.pipeline
    plant = pipeline.plants.for_emotion(emotion)
    assert pipeline.critical_layers[emotion] == plant.read_head[0]
    assert pipeline_run.summary["heads"]["top_heads"][emotion] == [plant.copy_head]
    traced = pipeline.neuron_scores[emotion][plant.copy_head]
    assert plant.trigger in [(s.layer, s.neuron) for s in traced[:3]]
    assert plant.copy_head in pipeline.spec.c_head


@pytest.mark.e2e
def test_knockout_recovery(pipeline_run: PipelineRun) -> None:
    results = read_report(pipeline_run.root / "circuit" / "knockout.json")["results"]
    for emotion in EMOTIONS:
        result = results[emotion]
        assert result["knocked_out"] <= result["neutral"] + 0.05
        assert result["recovery_fraction"] >= 0.9
        assert abs(result["control"] - result["emotional"]) <= 0.1


@pytest.mark.e2e
def test_phase_patch_follows_pathway(pipeline_run: PipelineRun) -> None:
    peaks = pipeline_run.summary["phase_patch"]["peak_roles"]
    assert peaks["adapt"] == TokenRole.VISUAL.value
    assert peaks["aggregate"] == TokenRole.QUERY.value


@pytest.mark.e2e
def test_veena_raises_hit_rate(pipeline_run: PipelineRun) -> None:
    summary = pipeline_run.summary["eval"]
    assert summary["veena_hit_rate"] >= summary["baseline_hit_rate"] + 0.10
    baseline = read_report(pipeline_run.root / "eval" / "baseline.json")
    assert baseline["metadata"]["intervention"] == "none"
