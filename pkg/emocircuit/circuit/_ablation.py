"""Phase-level patching, knockout and recovery, keyword probes and head-set comparisons."""

import itertools
from collections.abc import Collection, Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from emocircuit.circuit._restoration import Head, HeadScore, top_heads
from emocircuit.model import (
    ActivationTrace,
    CaptureFilter,
    ForwardHooks,
    InputSequence,
    Intervention,
    ModelBundle,
    ModelConfig,
    Phase,
    TokenRole,
    forward,
    greedy_decode,
)
from emocircuit.numerics import seeded_rng
from emocircuit.steering import ContrastivePair, Evaluator
from emocircuit.trace import HeadOutput, PatchSpec, TokenGroup, patch_hooks
from emocircuit.utils.sweep import sweep_map

Array = NDArray[np.float64]


def _layer_range(layers: range | tuple[int, int] | Iterable[int]) -> range:
    if isinstance(layers, range):
        return layers
    if isinstance(layers, tuple) and len(layers) == 2:
        return range(*layers)
    values = sorted(layers)
    if not values:
        return range(0)
    if values != list(range(values[0], values[-1] + 1)):
        raise ValueError(f"layers must be contiguous, got {values}")
    return range(values[0], values[-1] + 1)


def role_patch_hooks(
    bundle: ModelBundle,
    pair: ContrastivePair,
    role: TokenRole | Iterable[TokenRole],
    layers: range,
    donor: ActivationTrace | None = None,
) -> ForwardHooks:
    """
    Hooks overwriting the residual of every position with `role` (one role or several) across
    `layers` with the X+ values.

    A range starting at layer 0 also swaps in the X+ embedded rows, so the patched positions
    enter the first block (and its key/value cache) as X+ tokens.
    """
    if len(layers) == 0:
        return ForwardHooks()
    if donor is None:
        _, donor = forward(bundle, pair.x_plus, CaptureFilter(residual=True, layers=frozenset(layers)))
    roles = [role] if isinstance(role, TokenRole) else list(role)
    spec = PatchSpec(tuple(TokenGroup(r, layers) for r in roles))
    hooks = patch_hooks(spec, donor, pair.x_minus, bundle.config)
    if layers.start != 0:
        return hooks
    rows = {p: donor.embedded(p) for r in roles for p in pair.x_minus.positions(r)}

    def swap_embedded(x: Array, positions: tuple[int, ...]) -> Array:
        out = x.copy()
        for index, position in enumerate(positions):
            if position in rows:
                out[index] = rows[position]
        return out

    return hooks.merge(ForwardHooks(taps={("resid_pre", 0): swap_embedded}))


@dataclass(frozen=True)
class PhasePatchResult:
    role: TokenRole
    layers: range
    baseline_hit_rate: float
    patched_hit_rate: float

    @property
    def delta(self) -> float:
        return self.patched_hit_rate - self.baseline_hit_rate

    def to_dict(self) -> dict[str, Any]:
        return {
            "role": self.role.value,
            "layers": [self.layers.start, self.layers.stop],
            "baseline_hit_rate": self.baseline_hit_rate,
            "patched_hit_rate": self.patched_hit_rate,
            "delta": self.delta,
        }


def phase_patch(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    role: TokenRole | str,
    layers: range | tuple[int, int] | Iterable[int],
    evaluator: Evaluator,
    *,
    workers: int = 1,
) -> PhasePatchResult:
    """
    Mean hit-rate change from patching the `role` residuals over `layers` from X+ onto X-.

    The patch is active during prefill; decode steps read the patched prefix from the cache.
    An empty layer range leaves every decode unchanged, so the delta is exactly zero.
    """
    if not pairs:
        raise ValueError("phase_patch needs at least one pair")
    role = TokenRole(role)
    span = _layer_range(layers)
    if span and not (0 <= span.start and span.stop <= bundle.config.n_layers):
        raise IndexError(f"layers {span} outside [0, {bundle.config.n_layers})")

    def score(pair: ContrastivePair) -> tuple[float, float]:
        base = evaluator(bundle, pair.x_minus, pair.emotion)
        if len(span) == 0:
            return base, base
        patched = evaluator(bundle, pair.x_minus, pair.emotion, hooks=role_patch_hooks(bundle, pair, role, span))
        return base, patched

    scores = sweep_map(score, pairs, workers=workers)
    n = len(scores)
    return PhasePatchResult(
        role, span, sum(base for base, _ in scores) / n, sum(patched for _, patched in scores) / n
    )


def phase_grid(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    evaluator: Evaluator,
    *,
    roles: Sequence[TokenRole] = (TokenRole.VISUAL, TokenRole.QUERY, TokenRole.LAST),
    workers: int = 1,
) -> list[PhasePatchResult]:
    """`phase_patch` for every (phase, role) cell, phases in model order."""
    return [
        phase_patch(bundle, pairs, role, bundle.config.phase_layers(phase), evaluator, workers=workers)
        for phase in Phase
        for role in roles
    ]


def decodes_containing(decodes: Iterable[Sequence[int]], targets: Collection[int]) -> float:
    """Fraction of decodes that contain at least one target token."""
    decodes = list(decodes)
    if not decodes or not targets:
        return 0.0
    wanted = frozenset(targets)
    return sum(1 for tokens in decodes if wanted.intersection(tokens)) / len(decodes)


def keyword_frequency_probe(
    bundle: ModelBundle,
    inputs: Sequence[InputSequence],
    targets: Collection[int],
    *,
    hooks: ForwardHooks | Sequence[ForwardHooks | None] | None = None,
    intervention: Intervention | None = None,
    max_new: int = 8,
) -> float:
    """
    Fraction of greedy continuations containing any target token.

    `hooks` is either shared by every input or given per input, as for patches whose donor
    differs by input.

    Raises:
        IndexError: If a target lies outside the vocabulary.
    """
    for token in targets:
        if not 0 <= int(token) < bundle.config.vocab_size:
            raise IndexError(f"token id {token} out of range [0, {bundle.config.vocab_size})")
    per_input: Sequence[ForwardHooks | None]
    if hooks is None or isinstance(hooks, ForwardHooks):
        per_input = [hooks] * len(inputs)
    else:
        per_input = hooks
    decodes = [
        greedy_decode(bundle, x, max_new, intervention, hooks=h) for x, h in zip(inputs, per_input, strict=True)
    ]
    return decodes_containing(decodes, targets)


@dataclass(frozen=True)
class KeywordGrid:
    """Keyword frequency per (phase, role) patch, plus the unpatched X- frequency."""

    baseline: float
    cells: Mapping[tuple[Phase, TokenRole], float]

    def peak_role(self, phase: Phase) -> TokenRole:
        """Role with the highest frequency in `phase`; ties go to V, then Q, then L."""
        roles = [r for (p, r) in self.cells if p is phase]
        return max(roles, key=lambda role: (self.cells[(phase, role)], -list(TokenRole).index(role)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"phase": p.value, "role": r.value, "frequency": f} for (p, r), f in self.cells.items()],
            columns=["phase", "role", "frequency"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline": self.baseline,
            "cells": [{"phase": p.value, "role": r.value, "frequency": f} for (p, r), f in self.cells.items()],
        }


def keyword_frequency_grid(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    targets: Collection[int],
    phases: Sequence[Phase] = tuple(Phase),
    roles: Sequence[TokenRole] = (TokenRole.VISUAL, TokenRole.QUERY, TokenRole.LAST),
    *,
    max_new: int = 8,
    workers: int = 1,
) -> KeywordGrid:
    """Keyword frequency on X- with each role group patched from X+ over each phase's layers."""
    config = bundle.config
    negatives = [pair.x_minus for pair in pairs]
    donors = [forward(bundle, pair.x_plus, CaptureFilter(residual=True))[1] for pair in pairs]
    baseline = keyword_frequency_probe(bundle, negatives, targets, max_new=max_new)
    grid = [(phase, role) for phase in phases for role in roles]

    def cell(key: tuple[Phase, TokenRole]) -> float:
        phase, role = key
        layers = config.phase_layers(phase)
        hooks = [role_patch_hooks(bundle, pair, role, layers, donor) for pair, donor in zip(pairs, donors, strict=True)]
        return keyword_frequency_probe(bundle, negatives, targets, hooks=hooks, max_new=max_new)

    values = sweep_map(cell, grid, workers=workers)
    return KeywordGrid(baseline, dict(zip(grid, values, strict=True)))


def _check_heads(config: ModelConfig, heads: Iterable[Head]) -> list[Head]:
    checked = []
    for layer, head in heads:
        if not 0 <= layer < config.n_layers:
            raise IndexError(f"layer {layer} out of range [0, {config.n_layers})")
        if not 0 <= head < config.n_heads:
            raise IndexError(f"head {head} out of range [0, {config.n_heads})")
        checked.append((int(layer), int(head)))
    return sorted(set(checked))


def knockout_hooks(
    config: ModelConfig,
    input: InputSequence,
    heads: Iterable[Head],
    mode: str = "zero",
    donor: ActivationTrace | None = None,
) -> ForwardHooks:
    """
    Hooks for zero-ablation or recovery of `heads`.

    "zero" replaces each head's output with zeros at every position, decode steps included.
    "recover" patches the head outputs at every input position from `donor`.
    """
    selected = _check_heads(config, heads)
    if mode == "zero":
        return ForwardHooks(head_zero=frozenset(selected))
    if mode == "recover":
        if donor is None:
            raise ValueError("recover mode needs a donor trace")
        if not selected:
            return ForwardHooks()
        spec = PatchSpec(tuple(HeadOutput(layer, head) for layer, head in selected))
        return patch_hooks(spec, donor, input, config)
    raise ValueError(f"mode must be 'zero' or 'recover', got {mode!r}")


def knockout(
    bundle: ModelBundle,
    input: InputSequence,
    heads: Iterable[Head],
    mode: str = "zero",
    donor: ActivationTrace | None = None,
    *,
    max_new: int = 8,
) -> list[int]:
    """Greedy decode with `heads` zeroed or recovered from `donor`; see `knockout_hooks`."""
    return greedy_decode(bundle, input, max_new, hooks=knockout_hooks(bundle.config, input, heads, mode, donor))


@dataclass(frozen=True)
class KnockoutRecovery:
    """
    Necessity and sufficiency of a head set for one emotion.

    Attributes:
        emotional: Mean hit rate on X+ without ablation.
        neutral: Mean hit rate on X- without ablation.
        knocked_out: Mean hit rate on X+ with `heads` zeroed.
        control: Mean hit rate on X+ with `control_heads` zeroed, when a control was given.
        recovered: Mean hit rate on X- with the outputs of `heads` patched in from X+.
    """

    emotion: str
    heads: tuple[Head, ...]
    control_heads: tuple[Head, ...]
    emotional: float
    neutral: float
    knocked_out: float
    control: float | None
    recovered: float

    @property
    def recovery_fraction(self) -> float | None:
        """Share of the emotional-over-neutral gap the recovery restores; None without a gap."""
        gap = self.emotional - self.neutral
        if gap <= 0:
            return None
        return (self.recovered - self.neutral) / gap

    def to_dict(self) -> dict[str, Any]:
        return {
            "emotion": self.emotion,
            "heads": [list(h) for h in self.heads],
            "control_heads": [list(h) for h in self.control_heads],
            "emotional": self.emotional,
            "neutral": self.neutral,
            "knocked_out": self.knocked_out,
            "control": self.control,
            "recovered": self.recovered,
            "recovery_fraction": self.recovery_fraction,
        }


def knockout_recovery(
    bundle: ModelBundle,
    pairs: Sequence[ContrastivePair],
    heads: Iterable[Head],
    evaluator: Evaluator,
    *,
    control_heads: Iterable[Head] = (),
    workers: int = 1,
) -> KnockoutRecovery:
    """
    Knock out `heads` on the emotional inputs and recover them into the neutral runs.

    An equal-size `control_heads` set, when given, is knocked out the same way.

    Raises:
        ValueError: If `pairs` is empty or holds more than one emotion.
    """
    if not pairs:
        raise ValueError("knockout_recovery needs at least one pair")
    emotions = {pair.emotion for pair in pairs}
    if len(emotions) != 1:
        raise ValueError(f"knockout_recovery needs pairs of one emotion, got {sorted(emotions)}")
    config = bundle.config
    selected = _check_heads(config, heads)
    control = _check_heads(config, control_heads)
    capture = CaptureFilter(head_output=True, layers=frozenset(layer for layer, _ in selected))

    def score(pair: ContrastivePair) -> tuple[float, float, float, float | None, float]:
        emotion = pair.emotion
        emotional = evaluator(bundle, pair.x_plus, emotion)
        neutral = evaluator(bundle, pair.x_minus, emotion)
        zeroed = evaluator(bundle, pair.x_plus, emotion, hooks=knockout_hooks(config, pair.x_plus, selected))
        controlled = (
            evaluator(bundle, pair.x_plus, emotion, hooks=knockout_hooks(config, pair.x_plus, control))
            if control
            else None
        )
        _, donor = forward(bundle, pair.x_plus, capture)
        hooks = knockout_hooks(config, pair.x_minus, selected, "recover", donor)
        recovered = evaluator(bundle, pair.x_minus, emotion, hooks=hooks)
        return emotional, neutral, zeroed, controlled, recovered

    rows = sweep_map(score, pairs, workers=workers)
    emotional, neutral, zeroed, controlled, recovered = zip(*rows, strict=True)
    n = len(rows)
    return KnockoutRecovery(
        emotion=emotions.pop(),
        heads=tuple(selected),
        control_heads=tuple(control),
        emotional=sum(emotional) / n,
        neutral=sum(neutral) / n,
        knocked_out=sum(zeroed) / n,
        control=sum(c for c in controlled if c is not None) / n if control else None,
        recovered=sum(recovered) / n,
    )


def random_heads(config: ModelConfig, k: int, seed: int, exclude: Iterable[Head] = ()) -> list[Head]:
    """
    `k` heads drawn without replacement from those not in `exclude`, in (layer, head) order.

    Raises:
        ValueError: If fewer than `k` heads remain.
    """
    excluded = set(exclude)
    pool = [(layer, head) for layer in range(config.n_layers) for head in range(config.n_heads)]
    pool = [h for h in pool if h not in excluded]
    if k > len(pool):
        raise ValueError(f"cannot draw {k} heads from {len(pool)} candidates")
    chosen = seeded_rng(seed).choice(len(pool), size=k, replace=False)
    return sorted(pool[int(i)] for i in chosen)


def random_neurons(
    config: ModelConfig, k: int, seed: int, exclude: Iterable[tuple[int, int]] = (), max_layer: int | None = None
) -> list[tuple[int, int]]:
    """`k` (layer, neuron) pairs below `max_layer`, drawn as in `random_heads`."""
    excluded = set(exclude)
    limit = config.n_layers if max_layer is None else max_layer
    pool = [(layer, u) for layer in range(limit) for u in range(config.d_mlp) if (layer, u) not in excluded]
    if k > len(pool):
        raise ValueError(f"cannot draw {k} neurons from {len(pool)} candidates")
    chosen = seeded_rng(seed).choice(len(pool), size=k, replace=False)
    return sorted(pool[int(i)] for i in chosen)


@dataclass(frozen=True)
class HeadIntersection:
    """
    Upset counts of top-k head sets.

    `counts[subset]` is the number of heads that are in the top-k of exactly the emotions in
    `subset`; every head of the union falls in one cell.
    """

    k: int
    emotions: tuple[str, ...]
    counts: Mapping[tuple[str, ...], int]
    members: Mapping[tuple[str, ...], tuple[Head, ...]]

    @property
    def union_size(self) -> int:
        return sum(self.counts.values())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"emotions": "+".join(subset), "size": len(subset), "count": n} for subset, n in self.counts.items()],
            columns=["emotions", "size", "count"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "emotions": list(self.emotions),
            "cells": [
                {"emotions": list(subset), "count": n, "heads": [list(h) for h in self.members[subset]]}
                for subset, n in self.counts.items()
            ],
        }


def head_intersection(scores: Mapping[str, Sequence[HeadScore]], k: int) -> HeadIntersection:
    """
    Exact overlap counts of the top-`k` head sets, for every nonempty emotion subset.

    Raises:
        ValueError: If fewer than two emotions are given.
    """
    if len(scores) < 2:
        raise ValueError("head_intersection needs at least two emotions")
    emotions = tuple(sorted(scores))
    selected = {emotion: set(top_heads(scores[emotion], k)) for emotion in emotions}
    union = sorted(set().union(*selected.values()))
    members: dict[tuple[str, ...], list[Head]] = {}
    for size in range(1, len(emotions) + 1):
        for subset in itertools.combinations(emotions, size):
            members[subset] = []
    for head in union:
        owners = tuple(e for e in emotions if head in selected[e])
        members[owners].append(head)
    return HeadIntersection(
        k=k,
        emotions=emotions,
        counts={subset: len(heads) for subset, heads in members.items()},
        members={subset: tuple(heads) for subset, heads in members.items()},
    )

