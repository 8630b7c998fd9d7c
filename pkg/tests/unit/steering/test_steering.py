"""Unit tests for pair handling, steering extraction and the layer scan."""

from collections.abc import Mapping

import numpy as np
import pytest

from emocircuit.exceptions import MetricInputError, NoValidPairsError, PairError, UndefinedRatioError
from emocircuit.model import ForwardHooks, InputSequence, Intervention, ModelBundle, ModelConfig, greedy_decode
from emocircuit.steering import (
    ContrastivePair,
    SteeringSet,
    aggregate_steering,
    export_directions,
    extract_pair_direction,
    inject_steering,
    layer_scan,
    load_steering,
    pairs_for,
    read_directions,
    save_steering,
    split_pairs,
)
from tests.conftest import random_input, shifted_pair


class TableEvaluator:
    """Hit rates looked up by input fingerprint; steered calls add a per-layer bonus."""

    def __init__(self, rates: Mapping[str, float], bonus: Mapping[int, float] | None = None) -> None:
        self.rates = dict(rates)
        self.bonus = dict(bonus or {})

    def __call__(
        self,
        bundle: ModelBundle,
        input: InputSequence,
        emotion: str,
        *,
        hooks: ForwardHooks | None = None,
        intervention: Intervention | None = None,
    ) -> float:
        rate = self.rates.get(input.fingerprint(), 0.0)
        if hooks is not None:
            rate += sum(self.bonus.get(addition.layer, 0.0) for addition in hooks.residual_add)
        return rate


def _pairs(config: ModelConfig, n: int, emotion: str = "happy") -> list[ContrastivePair]:
    return [shifted_pair(config, seed, emotion=emotion) for seed in range(n)]


@pytest.mark.unit
def test_pair_sides_must_share_text(tiny_config: ModelConfig) -> None:
    first, second = random_input(tiny_config, 1), random_input(tiny_config, 2)
    with pytest.raises(PairError):
        ContrastivePair("p", "happy", first, second)
    with pytest.raises(PairError, match="visual_pos"):
        ContrastivePair("p", "happy", first, first, visual_pos=3)


@pytest.mark.unit
def test_split_is_deterministic_and_grouped(tiny_config: ModelConfig) -> None:
    pairs = _pairs(tiny_config, 5, "sad")[::-1] + _pairs(tiny_config, 3, "happy")
    extraction, analysis = split_pairs(pairs)
    assert [p.pair_id for p in extraction] == ["happy-0000", "happy-0001", "sad-0000", "sad-0001", "sad-0002"]
    assert [p.pair_id for p in analysis] == ["happy-0002", "sad-0003", "sad-0004"]
    extraction, analysis = split_pairs(pairs, n_extract=4)
    assert len(extraction) == 7 and len(analysis) == 1
    assert [p.pair_id for p in pairs_for(pairs, "sad")] == [f"sad-{i:04d}" for i in range(5)]


@pytest.mark.unit
def test_pair_direction_is_antisymmetric(tiny_bundle: ModelBundle, tiny_pair: ContrastivePair) -> None:
    direction = extract_pair_direction(tiny_bundle, tiny_pair)
    reverse = extract_pair_direction(tiny_bundle, tiny_pair.swapped())
    assert direction.vectors.shape == (tiny_bundle.config.n_layers, tiny_bundle.config.d_model)
    np.testing.assert_array_equal(direction.vectors, -reverse.vectors)


@pytest.mark.unit
def test_pair_direction_of_identical_sides_is_zero(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    direction = extract_pair_direction(tiny_bundle, ContrastivePair("same", "happy", tiny_input, tiny_input))
    assert np.all(direction.vectors == 0.0)


@pytest.mark.unit
def test_aggregate_keeps_pairs_strictly_above_tau(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    pairs = _pairs(tiny_config, 4)
    rates = {p.x_plus.fingerprint(): rate for p, rate in zip(pairs, [1.0, 0.5, 0.75, 0.0], strict=True)}
    steering = aggregate_steering(tiny_bundle, pairs, "happy", 0.5, TableEvaluator(rates))
    assert steering.pair_ids == ("happy-0000", "happy-0002")
    assert steering.hit_rates["happy-0001"] == 0.5
    expected = (
        extract_pair_direction(tiny_bundle, pairs[0]).vectors + extract_pair_direction(tiny_bundle, pairs[2]).vectors
    ) / 2
    np.testing.assert_allclose(steering.vectors, expected, atol=1e-15)


@pytest.mark.unit
def test_aggregate_does_not_depend_on_workers(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    pairs = _pairs(tiny_config, 6)
    evaluator = TableEvaluator({p.x_plus.fingerprint(): 1.0 for p in pairs})
    serial = aggregate_steering(tiny_bundle, pairs, "happy", 0.5, evaluator)
    threaded = aggregate_steering(tiny_bundle, pairs[::-1], "happy", 0.5, evaluator, workers=3)
    assert np.array_equal(serial.vectors, threaded.vectors)


@pytest.mark.unit
def test_aggregate_without_valid_pairs(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    pairs = _pairs(tiny_config, 2)
    with pytest.raises(NoValidPairsError) as excinfo:
        aggregate_steering(tiny_bundle, pairs, "happy", 0.5, TableEvaluator({}))
    assert excinfo.value.hit_rates == {"happy-0000": 0.0, "happy-0001": 0.0}


def _steering(config: ModelConfig, seed: int = 0) -> SteeringSet:
    vectors = np.random.default_rng(seed).standard_normal((config.n_layers, config.d_model))
    return SteeringSet("happy", vectors, ("happy-0000",), 0.5)


@pytest.mark.unit
def test_zero_alpha_injection_is_a_plain_decode(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    steering = _steering(tiny_bundle.config)
    assert inject_steering(tiny_bundle, tiny_input, steering, 1, 0.0) == greedy_decode(tiny_bundle, tiny_input, 8)
    with pytest.raises(IndexError):
        inject_steering(tiny_bundle, tiny_input, steering, 3, 1.0)


@pytest.mark.unit
def test_strong_injection_changes_the_decode(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    steering = _steering(tiny_bundle.config)
    # the final layer norm centers the dominating direction before the unembedding
    direction = steering.vector(2) - steering.vector(2).mean()
    target = int(np.argmax(direction @ tiny_bundle.weights.unembedding))
    tokens = inject_steering(tiny_bundle, tiny_input, steering, 2, 1e4, max_new=3)
    assert tokens == [target] * 3


@pytest.mark.unit
def test_layer_scan_sorts_by_change_ratio(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    probes = [random_input(tiny_config, seed) for seed in range(3)]
    evaluator = TableEvaluator({x.fingerprint(): 0.5 for x in probes}, bonus={1: 0.25, 2: 0.25})
    scan = layer_scan(tiny_bundle, _steering(tiny_config), probes, 0.1, evaluator)
    assert [e.layer for e in scan.entries] == [1, 2, 0]
    assert scan.peak_layer == 1
    assert scan.by_layer()[1].change_ratio == pytest.approx(50.0)
    assert scan.by_layer()[0].change_ratio == 0.0
    assert list(scan.to_frame().columns) == ["layer", "hit_rate", "change_ratio"]


@pytest.mark.unit
def test_layer_scan_with_zero_baseline(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    probes = [random_input(tiny_config, 0)]
    with pytest.raises(UndefinedRatioError, match="l2=0.2500"):
        layer_scan(tiny_bundle, _steering(tiny_config), probes, 0.1, TableEvaluator({}, bonus={2: 0.25}))


@pytest.mark.unit
def test_layer_scan_needs_inputs(tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    with pytest.raises(MetricInputError, match="at least one input"):
        layer_scan(tiny_bundle, _steering(tiny_config), [], 0.1, TableEvaluator({}))


@pytest.mark.unit
def test_steering_file_round_trip(tmp_path, tiny_config: ModelConfig) -> None:
    vectors = _steering(tiny_config).vectors
    steering = SteeringSet("happy", vectors, ("happy-0000", "happy-0003"), 0.5, {"happy-0000": 1.0})
    loaded = load_steering(save_steering(steering, tmp_path / "happy.emm"))
    assert np.array_equal(loaded.vectors, steering.vectors)
    assert loaded.pair_ids == steering.pair_ids
    assert loaded.hit_rates == {"happy-0000": 1.0}


@pytest.mark.unit
def test_exported_directions_keep_row_order(tmp_path, tiny_bundle: ModelBundle, tiny_config: ModelConfig) -> None:
    directions = [extract_pair_direction(tiny_bundle, p) for p in _pairs(tiny_config, 3)]
    matrix, meta = read_directions(export_directions(directions, 1, tmp_path / "directions.emm"))
    assert matrix.shape == (3, tiny_config.d_model)
    assert np.array_equal(matrix[2], directions[2].at(1))
    assert meta["pair_ids"] == ["happy-0000", "happy-0001", "happy-0002"]
    with pytest.raises(ValueError):
        export_directions([], 1, tmp_path / "empty.emm")
