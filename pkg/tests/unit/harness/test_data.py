"""Unit tests for dataset files, probe sets and neutral inputs."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from emocircuit.exceptions import DatasetFormatError
from emocircuit.harness import (
    PROBE_HIGH,
    PROBE_LOW,
    Dataset,
    PlantSet,
    gen_dataset,
    gen_probe_set,
    load_dataset,
    neutral_inputs,
    save_dataset,
)
from emocircuit.model import ModelConfig
from emocircuit.utils.binary import write_matrix_bundle


@pytest.fixture
def dataset(small_config: ModelConfig, small_plants: PlantSet) -> Dataset:
    return gen_dataset(5, 2, small_plants, small_config)


def _rewrite_records(path: Path, edit) -> None:
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    records = edit(records)
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


@pytest.mark.unit
def test_dataset_layout(dataset: Dataset, small_plants: PlantSet) -> None:
    assert len(dataset) == 2 * len(small_plants.plants)
    assert dataset.emotions == tuple(sorted(small_plants.emotions))
    record = dataset.records()[0]
    assert set(record) == {"id", "emotion", "text_token_ids", "visual_pos", "positive", "negative"}
    assert record["positive"] == f"{record['id']}/positive"


@pytest.mark.unit
def test_save_and_load_dataset(dataset: Dataset, tmp_path: Path) -> None:
    records_path, blob_path = save_dataset(dataset, tmp_path / "pairs")
    assert records_path.name == "pairs.jsonl"
    assert blob_path.name == "pairs.bin"

    loaded = load_dataset(tmp_path / "pairs.jsonl")
    assert loaded.config == dataset.config
    assert [p.pair_id for p in loaded] == [p.pair_id for p in dataset]
    for original, restored in zip(dataset, loaded, strict=True):
        assert restored.emotion == original.emotion
        assert restored.visual_pos == original.visual_pos
        assert restored.x_plus.text_token_ids == original.x_plus.text_token_ids
        np.testing.assert_array_equal(restored.x_plus.visual_embeddings, original.x_plus.visual_embeddings)
        np.testing.assert_array_equal(restored.x_minus.visual_embeddings, original.x_minus.visual_embeddings)


@pytest.mark.unit
def test_load_dataset_needs_both_files(dataset: Dataset, tmp_path: Path) -> None:
    _, blob_path = save_dataset(dataset, tmp_path / "pairs")
    blob_path.unlink()
    with pytest.raises(DatasetFormatError, match="needs both"):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_load_dataset_rejects_corrupt_matrices(dataset: Dataset, tmp_path: Path) -> None:
    _, blob_path = save_dataset(dataset, tmp_path / "pairs")
    data = bytearray(blob_path.read_bytes())
    data[-8] ^= 0xFF
    blob_path.write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_load_dataset_rejects_duplicate_ids(dataset: Dataset, tmp_path: Path) -> None:
    records_path, _ = save_dataset(dataset, tmp_path / "pairs")
    _rewrite_records(records_path, lambda records: [*records, records[0]])
    with pytest.raises(DatasetFormatError, match="duplicate record id"):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_load_dataset_rejects_one_matrix_for_both_sides(dataset: Dataset, tmp_path: Path) -> None:
    records_path, _ = save_dataset(dataset, tmp_path / "pairs")

    def same_matrix(records: list[dict]) -> list[dict]:
        records[0]["negative"] = records[0]["positive"]
        return records

    _rewrite_records(records_path, same_matrix)
    with pytest.raises(DatasetFormatError, match="one matrix for both sides"):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_load_dataset_rejects_missing_matrix(dataset: Dataset, tmp_path: Path) -> None:
    records_path, _ = save_dataset(dataset, tmp_path / "pairs")

    def dangling(records: list[dict]) -> list[dict]:
        records[1]["positive"] = "absent/positive"
        return records

    _rewrite_records(records_path, dangling)
    with pytest.raises(DatasetFormatError, match="malformed record"):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_load_dataset_rejects_wrong_shapes(dataset: Dataset, tmp_path: Path) -> None:
    _, blob_path = save_dataset(dataset, tmp_path / "pairs")
    arrays = {}
    for pair in dataset:
        arrays[f"{pair.pair_id}/positive"] = np.zeros((2, dataset.config.d_model))
        arrays[f"{pair.pair_id}/negative"] = np.ones((2, dataset.config.d_model))
    write_matrix_bundle(blob_path, arrays, {"model": dataset.config.to_dict(), "n_records": len(dataset)})
    with pytest.raises(DatasetFormatError, match="expected"):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_load_dataset_rejects_invalid_json(dataset: Dataset, tmp_path: Path) -> None:
    records_path, _ = save_dataset(dataset, tmp_path / "pairs")
    with records_path.open("a", encoding="utf-8") as handle:
        handle.write("{not json\n")
    with pytest.raises(DatasetFormatError, match="pairs.jsonl"):
        load_dataset(tmp_path / "pairs")


@pytest.mark.unit
def test_probe_set_intensities_are_stratified(small_config: ModelConfig, small_plants: PlantSet) -> None:
    n = 5
    probes = gen_probe_set(3, n, small_plants, small_config)
    assert len(probes.probes) == n * len(small_plants.plants)
    low, high = math.log10(PROBE_LOW), math.log10(PROBE_HIGH)
    for plant in small_plants.plants:
        mine = [p for p in probes.probes if p.emotion == plant.emotion]
        assert [p.probe_id for p in mine] == [f"{plant.emotion}-probe-{i:04d}" for i in range(n)]
        for index, probe in enumerate(mine):
            fraction = (math.log10(probe.intensity / plant.strength) - low) / (high - low)
            assert index / n <= fraction <= (index + 1) / n
        assert len(probes.for_emotion(plant.emotion)) == n
    assert sorted(probes.by_emotion()) == sorted(small_plants.emotions)
    limited = probes.by_emotion(2)
    assert all(len(inputs) == 2 for inputs in limited.values())
    assert limited[probes.probes[0].emotion][0] is probes.probes[0].input


@pytest.mark.unit
def test_probe_set_is_deterministic(small_config: ModelConfig, small_plants: PlantSet) -> None:
    first = gen_probe_set(3, 2, small_plants, small_config)
    second = gen_probe_set(3, 2, small_plants, small_config)
    assert first.to_dict() == second.to_dict()
    for a, b in zip(first.probes, second.probes, strict=True):
        np.testing.assert_array_equal(a.input.visual_embeddings, b.input.visual_embeddings)
        assert a.input.text_token_ids == b.input.text_token_ids


@pytest.mark.unit
def test_probe_text_avoids_keywords(small_config: ModelConfig, small_plants: PlantSet) -> None:
    allowed = set(small_plants.neutral_tokens(small_config.vocab_size))
    for probe in gen_probe_set(3, 3, small_plants, small_config).probes:
        assert set(probe.input.text_token_ids) <= allowed
        assert len(probe.input.text_token_ids) == small_plants.text_length


@pytest.mark.unit
def test_neutral_inputs(dataset: Dataset) -> None:
    pairs = list(dataset)
    neutral = neutral_inputs(pairs)
    assert len(neutral) == len(pairs)
    assert neutral[0] is pairs[0].x_minus
    assert neutral_inputs(pairs, 3) == [p.x_minus for p in pairs[:3]]
