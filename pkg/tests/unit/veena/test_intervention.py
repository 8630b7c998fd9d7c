"""Unit tests for VEE attention scaling, ENA neuron scaling and provenance replay."""

import contextlib

import numpy as np
import pytest

from emocircuit.exceptions import AblationVariantWarning
from emocircuit.model import InputSequence, ModelBundle, ModelConfig, TokenRole, greedy_decode
from emocircuit.veena import (
    InterventionSpec,
    VeeMode,
    apply_ena,
    apply_vee,
    load_spec,
    read_provenance,
    replay_veena,
    run_veena,
    save_spec,
    vee_mask,
    write_provenance,
)

V, Q, L = TokenRole.VISUAL, TokenRole.QUERY, TokenRole.LAST
ROLES = (V, V, Q, Q, L)


@pytest.mark.unit
def test_spec_rejects_damping_coefficients() -> None:
    with pytest.raises(ValueError, match="beta"):
        InterventionSpec(beta=0.5)
    with pytest.raises(ValueError, match="gamma"):
        InterventionSpec(gamma=0.99)


@pytest.mark.unit
def test_spec_validation_against_the_model(tiny_config: ModelConfig) -> None:
    InterventionSpec(l_emo=-1).validate(tiny_config)
    with pytest.raises(IndexError):
        InterventionSpec(l_emo=3).validate(tiny_config)
    with pytest.raises(IndexError):
        InterventionSpec(c_head={(0, 2)}).validate(tiny_config)
    with pytest.raises(IndexError):
        InterventionSpec(c_neuron={(0, 16)}).validate(tiny_config)


@pytest.mark.unit
def test_prefill_mask_boosts_visual_keys_of_query_rows() -> None:
    spec = InterventionSpec(c_head={(0, 1)}, beta=3.0, l_emo=1)
    mask = vee_mask(spec, 0, 0, 1, ROLES)
    expected = np.ones((5, 5))
    expected[2:4, :2] = 3.0
    assert np.array_equal(mask, expected)
    assert np.all(vee_mask(spec, 0, 2, 1, ROLES) == 1.0)
    assert np.all(vee_mask(spec, 0, 0, 0, ROLES) == 1.0)
    assert np.all(vee_mask(spec.replace(vee=False), 0, 0, 1, ROLES) == 1.0)


@pytest.mark.unit
def test_decode_mask_boosts_visual_keys_of_the_new_row() -> None:
    spec = InterventionSpec(c_head={(2, 0)}, beta=2.0, l_emo=1)
    roles = ROLES + (L,)
    mask = vee_mask(spec, 1, 2, 0, roles)
    assert mask.shape == (1, 6)
    assert np.array_equal(mask[0], [2.0, 2.0, 1.0, 1.0, 1.0, 1.0])
    assert np.all(vee_mask(spec, 1, 1, 0, roles) == 1.0)


@pytest.mark.unit
def test_apply_vee_is_literal_and_keeps_masked_cells() -> None:
    scores = np.array([[-np.inf, -2.0], [1.0, 0.5]])
    mask = np.array([[2.0, 2.0], [1.0, 2.0]])
    out = apply_vee(scores, mask)
    assert out[0, 0] == -np.inf
    assert out[0, 1] == -4.0
    assert np.array_equal(out[1], [1.0, 1.0])
    additive = apply_vee(scores, mask, additive=True)
    assert additive[0, 1] == pytest.approx(-2.0 + np.log(2.0))
    with pytest.raises(ValueError):
        apply_vee(scores, np.ones((3, 3)))


@pytest.mark.unit
def test_apply_ena_scales_listed_neurons_only() -> None:
    spec = InterventionSpec(c_neuron={(1, 2), (0, 0)}, gamma=4.0)
    acts = np.ones((2, 4))
    assert np.array_equal(apply_ena(acts, spec, 1), [[1, 1, 4, 1], [1, 1, 4, 1]])
    assert np.array_equal(apply_ena(acts, spec.replace(ena=False), 1), acts)


@pytest.mark.unit
def test_unit_coefficients_are_inert(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    spec = InterventionSpec(c_head={(0, 0), (2, 1)}, c_neuron={(1, 3)}, beta=1.0, gamma=1.0, l_emo=1)
    result = run_veena(tiny_bundle, tiny_input, spec, max_new=4)
    assert result.tokens == greedy_decode(tiny_bundle, tiny_input, 4)
    assert result.provenance == ()


@pytest.mark.unit
def test_provenance_follows_the_flow_conditions(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    spec = InterventionSpec(c_head={(0, 1), (2, 0)}, beta=2.0, l_emo=1, ena=False)
    records = run_veena(tiny_bundle, tiny_input, spec, max_new=3).provenance
    assert [(r.step, r.layer, r.kind, r.index) for r in records] == [
        (0, 0, "head", 1),
        (1, 2, "head", 0),
        (2, 2, "head", 0),
    ]
    assert set(records[0].cells) == {(q, k) for q in (3, 4, 5) for k in (0, 1, 2)}
    assert records[2].cells == ((8, 0), (8, 1), (8, 2))


@pytest.mark.unit
def test_l_emo_bounds_disable_one_flow(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    spec = InterventionSpec(c_head={(0, 1), (2, 0)}, beta=2.0, ena=False, l_emo=-1)
    assert all(r.step > 0 for r in run_veena(tiny_bundle, tiny_input, spec, max_new=3).provenance)
    spec = spec.replace(l_emo=2)
    assert all(r.step == 0 for r in run_veena(tiny_bundle, tiny_input, spec, max_new=3).provenance)


@pytest.mark.unit
def test_ena_records_every_step(tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    spec = InterventionSpec(c_neuron={(0, 3), (1, 5)}, gamma=3.0, vee=False)
    records = run_veena(tiny_bundle, tiny_input, spec, max_new=4).provenance
    assert len(records) == 8
    assert {r.step for r in records} == {0, 1, 2, 3}
    assert records[0].cells == tuple((p,) for p in range(tiny_input.length))


@pytest.mark.unit
@pytest.mark.parametrize("mode", list(VeeMode))
def test_replay_reproduces_the_decode(tiny_bundle: ModelBundle, tiny_input: InputSequence, mode: VeeMode) -> None:
    spec = InterventionSpec(c_head={(0, 1), (2, 0)}, c_neuron={(1, 5)}, beta=8.0, gamma=6.0, l_emo=1, mode=mode)
    with pytest.warns(AblationVariantWarning) if mode is VeeMode.ADDITIVE else contextlib.nullcontext():
        result = run_veena(tiny_bundle, tiny_input, spec, max_new=5)
    additive = mode is VeeMode.ADDITIVE
    assert replay_veena(tiny_bundle, tiny_input, result.provenance, 5, additive=additive) == result.tokens


@pytest.mark.unit
def test_spec_and_provenance_files(tmp_path, tiny_bundle: ModelBundle, tiny_input: InputSequence) -> None:
    spec = InterventionSpec(c_head={(0, 1)}, c_neuron={(1, 5)}, beta=5.0, gamma=2.0, l_emo=1, mode="additive")
    assert load_spec(save_spec(spec, tmp_path / "spec.json")) == spec
    assert spec.to_dict()["vee_mode"] == "additive"
    with pytest.warns(AblationVariantWarning):
        records = run_veena(tiny_bundle, tiny_input, spec, max_new=3).provenance
    assert read_provenance(write_provenance(records, tmp_path / "provenance.jsonl")) == list(records)
