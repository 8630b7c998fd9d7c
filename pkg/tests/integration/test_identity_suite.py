"""Integration tests: inert interventions reproduce the plain pass, and traces stay finite, on random inputs."""

import numpy as np
import pytest

from emocircuit.model import FAMILIES, CaptureFilter, ForwardHooks, ModelBundle, ModelConfig, decode_steps, forward
from emocircuit.numerics import seeded_rng
from emocircuit.steering import SteeringSet, steering_hooks
from emocircuit.trace import HeadOutput, NeuronActivation, PatchSpec, ResidualAt, run_with_capture, run_with_patches
from emocircuit.veena import InterventionSpec
from tests.conftest import random_input

SEEDS = range(50)
MAX_NEW = 6


def _same_steps(
    bundle: ModelBundle, seed: int, *, intervention: InterventionSpec | None = None, hooks: ForwardHooks | None = None
) -> None:
    x = random_input(bundle.config, seed)
    plain = decode_steps(bundle, x, MAX_NEW)
    changed = decode_steps(bundle, x, MAX_NEW, intervention, hooks=hooks)
    assert changed.tokens == plain.tokens
    for ours, theirs in zip(changed.step_logits, plain.step_logits, strict=True):
        assert np.array_equal(ours, theirs)


def _self_patch_spec(config: ModelConfig, length: int) -> PatchSpec:
    every = tuple(range(length))
    targets: list[ResidualAt | HeadOutput | NeuronActivation] = []
    for layer in range(config.n_layers):
        targets.append(ResidualAt(layer, every))
        targets += [HeadOutput(layer, head) for head in range(config.n_heads)]
        targets += [NeuronActivation(layer, u, every) for u in range(config.d_mlp)]
    return PatchSpec(tuple(targets))


@pytest.mark.integration
@pytest.mark.parametrize("seed", SEEDS)
def test_empty_patch_spec_is_a_plain_pass(tiny_bundle: ModelBundle, seed: int) -> None:
    x = random_input(tiny_bundle.config, seed)
    plain, _ = forward(tiny_bundle, x)
    patched, _ = run_with_patches(tiny_bundle, x, None, PatchSpec())
    assert np.array_equal(patched, plain)


@pytest.mark.integration
@pytest.mark.parametrize("seed", SEEDS)
def test_patching_an_input_from_itself_is_a_plain_pass(tiny_bundle: ModelBundle, seed: int) -> None:
    x = random_input(tiny_bundle.config, seed)
    spec = _self_patch_spec(tiny_bundle.config, x.length)
    plain, donor = run_with_capture(tiny_bundle, x, spec.required_capture())
    patched, _ = run_with_patches(tiny_bundle, x, donor, spec)
    assert np.array_equal(patched, plain)


@pytest.mark.integration
@pytest.mark.parametrize("seed", SEEDS)
def test_zero_alpha_steering_leaves_every_step_unchanged(tiny_bundle: ModelBundle, seed: int) -> None:
    config = tiny_bundle.config
    vectors = seeded_rng(seed + 500).standard_normal((config.n_layers, config.d_model))
    steering = SteeringSet("happy", vectors, ("happy-0000",), 0.5)
    _same_steps(tiny_bundle, seed, hooks=steering_hooks(steering, seed % config.n_layers, 0.0))


@pytest.mark.integration
@pytest.mark.parametrize("seed", SEEDS)
def test_unit_veena_coefficients_leave_every_step_unchanged(tiny_bundle: ModelBundle, seed: int) -> None:
    config = tiny_bundle.config
    heads = {(layer, head) for layer in range(config.n_layers) for head in range(config.n_heads)}
    neurons = {(layer, u) for layer in range(config.n_layers) for u in range(0, config.d_mlp, 3)}
    spec = InterventionSpec(c_head=heads, c_neuron=neurons, beta=1.0, gamma=1.0, l_emo=config.aggregate_end)
    _same_steps(tiny_bundle, seed, intervention=spec)


@pytest.mark.integration
@pytest.mark.parametrize("seed", SEEDS)
def test_traces_are_finite_and_attention_rows_are_distributions(tiny_bundle: ModelBundle, seed: int) -> None:
    config = tiny_bundle.config
    logits, trace = forward(tiny_bundle, random_input(config, seed), CaptureFilter.full())
    assert np.all(np.isfinite(logits))
    for family in FAMILIES:
        for cell in trace.cells(family).values():
            assert np.all(np.isfinite(cell)), family
    for layer in range(config.n_layers):
        for head in range(config.n_heads):
            probs = trace.attention_probs(layer, head)
            assert np.all(np.isfinite(probs))
            assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) <= 1e-12
