import json
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import DatasetFormatError, PairError
from emocircuit.harness._plant import PlantSet, gen_pairs, neutral_visual
from emocircuit.model import InputSequence, ModelConfig
from emocircuit.numerics import derive_seed, seeded_rng
from emocircuit.steering import ContrastivePair
from emocircuit.utils.binary import read_matrix_bundle, write_matrix_bundle
from emocircuit.utils.canonical import canonical_line, write_text_atomic

Array = NDArray[np.float64]

# probe intensity range, as a fraction of the plant strength
PROBE_LOW = 1e-3
PROBE_HIGH = 1e-1


@dataclass(frozen=True)
class Dataset:
    """Contrastive pairs with the config they were generated for."""

    pairs: tuple[ContrastivePair, ...]
    config: ModelConfig

    def __iter__(self) -> Iterator[ContrastivePair]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def emotions(self) -> tuple[str, ...]:
        return tuple(sorted({p.emotion for p in self.pairs}))

    def records(self) -> list[dict[str, Any]]:
        return [
            {
                "id": pair.pair_id,
                "emotion": pair.emotion,
                "text_token_ids": list(pair.x_plus.text_token_ids),
                "visual_pos": pair.visual_pos,
                "positive": f"{pair.pair_id}/positive",
                "negative": f"{pair.pair_id}/negative",
            }
            for pair in self.pairs
        ]


def gen_dataset(seed: int, n_pairs: int, plants: PlantSet, config: ModelConfig) -> Dataset:
    """`n_pairs` pairs per emotion; see `gen_pairs`."""
    return Dataset(tuple(gen_pairs(seed, n_pairs, plants, config)), config)


def _paths(path: str | Path) -> tuple[Path, Path]:
    stem = Path(path)
    if stem.suffix in (".jsonl", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".jsonl"), stem.with_suffix(".bin")


def save_dataset(dataset: Dataset, path: str | Path) -> tuple[Path, Path]:
    """
    Write `<stem>.jsonl` (one record per pair) and `<stem>.bin` (EMM1 visual matrices).

    Each record names its positive and negative matrix entries in the binary file.
    """
    records_path, blob_path = _paths(path)
    arrays: dict[str, Array] = {}
    for pair in dataset.pairs:
        arrays[f"{pair.pair_id}/positive"] = pair.x_plus.visual_embeddings
        arrays[f"{pair.pair_id}/negative"] = pair.x_minus.visual_embeddings
    write_matrix_bundle(blob_path, arrays, {"model": dataset.config.to_dict(), "n_records": len(dataset)})
    write_text_atomic(records_path, "".join(canonical_line(r) for r in dataset.records()))
    return records_path, blob_path


def _record_pair(record: Mapping[str, Any], arrays: Mapping[str, Array], config: ModelConfig) -> ContrastivePair:
    try:
        pair_id = str(record["id"])
        emotion = str(record["emotion"])
        text = [int(t) for t in record["text_token_ids"]]
        positive, negative = arrays[record["positive"]], arrays[record["negative"]]
        position = record.get("visual_pos")
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"malformed record {record!r}: {e}") from e
    if record["positive"] == record["negative"]:
        raise DatasetFormatError(f"record {pair_id} uses one matrix for both sides")
    expected = (config.n_visual, config.d_model)
    if positive.shape != expected or negative.shape != expected:
        raise DatasetFormatError(
            f"record {pair_id}: visual matrices {positive.shape} and {negative.shape}, expected {expected}"
        )
    try:
        return ContrastivePair(
            pair_id,
            emotion,
            InputSequence(positive, text),
            InputSequence(negative, text),
            None if position is None else int(position),
        )
    except PairError as e:
        raise DatasetFormatError(str(e)) from e


def load_dataset(path: str | Path) -> Dataset:
    """
    Read and validate a dataset file pair.

    Raises:
        DatasetFormatError: If the files are missing, corrupt, reference absent matrices,
            repeat an id, or hold visual matrices of the wrong shape.
    """
    records_path, blob_path = _paths(path)
    if not records_path.exists() or not blob_path.exists():
        raise DatasetFormatError(f"dataset needs both {records_path.name} and {blob_path.name}")
    arrays, meta = read_matrix_bundle(blob_path, error=DatasetFormatError)
    try:
        config = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"dataset header has no valid model config: {e}") from e
    pairs: list[ContrastivePair] = []
    seen: set[str] = set()
    with records_path.open(encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{records_path.name}:{number}: {e}") from e
            pair = _record_pair(record, arrays, config)
            if pair.pair_id in seen:
                raise DatasetFormatError(f"duplicate record id {pair.pair_id}")
            seen.add(pair.pair_id)
            pairs.append(pair)
    return Dataset(tuple(pairs), config)


@dataclass(frozen=True)
class Probe:
    probe_id: str
    emotion: str
    input: InputSequence
    intensity: float


@dataclass(frozen=True)
class ProbeSet:
    """Positive probes of graded feature intensity, grouped by emotion."""

    probes: tuple[Probe, ...]

    def by_emotion(self, limit: int | None = None) -> dict[str, list[InputSequence]]:
        """Probe inputs per emotion in id order, at most `limit` of each."""
        grouped: dict[str, list[InputSequence]] = {}
        for probe in self.probes:
            group = grouped.setdefault(probe.emotion, [])
            if limit is None or len(group) < limit:
                group.append(probe.input)
        return grouped

    def for_emotion(self, emotion: str) -> list[InputSequence]:
        return [p.input for p in self.probes if p.emotion == emotion]

    def to_dict(self) -> dict[str, Any]:
        return {"probes": [{"id": p.probe_id, "emotion": p.emotion, "intensity": p.intensity} for p in self.probes]}


def gen_probe_set(seed: int, n: int, plants: PlantSet, config: ModelConfig) -> ProbeSet:
    """
    `n` positive probes per emotion with log-uniform feature intensity.

    Intensities are stratified over [1e-3, 1e-1] times the plant strength: probe i draws
    uniformly from the i-th of `n` equal slices of the log range. Baseline recognition on the
    set is partial, which leaves room to measure interventions.
    """
    tokens = np.array(plants.neutral_tokens(config.vocab_size))
    low, high = math.log10(PROBE_LOW), math.log10(PROBE_HIGH)
    probes = []
    for plant in plants.plants:
        rng = seeded_rng(derive_seed(seed, "probes", plant.emotion))
        for index in range(n):
            fraction = (index + float(rng.random())) / n
            intensity = plant.strength * 10.0 ** (low + (high - low) * fraction)
            visual = neutral_visual(rng, config, plants)
            position = int(rng.integers(config.n_visual))
            visual[position] += intensity * plant.feature
            text = tokens[rng.integers(len(tokens), size=plants.text_length)]
            probe_id = f"{plant.emotion}-probe-{index:04d}"
            probes.append(Probe(probe_id, plant.emotion, InputSequence(visual, text.tolist()), intensity))
    return ProbeSet(tuple(probes))


def neutral_inputs(pairs: Sequence[ContrastivePair], n: int | None = None) -> list[InputSequence]:
    """The negative sides of `pairs`, first `n` in order."""
    selected = pairs if n is None else pairs[:n]
    return [p.x_minus for p in selected]
