"""
Flow-aware attention scaling (VEE) and emotional neuron augmentation (ENA).

VEE multiplies pre-softmax scores of the critical heads on two visual flows:

    prefill, layer <= l_emo:  query role Q, key role V      (visual into the query)
    decode,  layer >  l_emo:  current generated row, key V  (visual into each new token)

ENA multiplies the post-nonlinearity activations of the critical neurons at every position
and every decode step. Both are inert at beta = 1 and gamma = 1: no kernel runs at all.
"""

import enum
import json
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import AblationVariantWarning
from emocircuit.model import ForwardHooks, InputSequence, ModelBundle, ModelConfig, TokenRole, decode_steps
from emocircuit.utils.canonical import canonical_line, read_canonical, write_canonical, write_text_atomic

Array = NDArray[np.float64]
Head = tuple[int, int]
Neuron = tuple[int, int]


class VeeMode(enum.Enum):
    MULTIPLICATIVE = "multiplicative"
    # ablation: adds ln(beta) to the score instead of multiplying it
    ADDITIVE = "additive"


@dataclass(frozen=True)
class InterventionSpec:
    """
    Critical components and coefficients of one VEENA intervention.

    Attributes:
        c_head: Critical heads (layer, head).
        c_neuron: Critical neurons (layer, neuron).
        beta: Attention enhancement coefficient, at least 1.
        gamma: Neuron excitation coefficient, at least 1.
        l_emo: Critical middle layer; -1 disables the prefill flow and n_layers - 1 the decode flow.
        vee: Enable attention scaling.
        ena: Enable neuron scaling.
        mode: Multiplicative (default) or the additive ln(beta) variant.
    """

    c_head: frozenset[Head] = frozenset()
    c_neuron: frozenset[Neuron] = frozenset()
    beta: float = 2.0
    gamma: float = 1.5
    l_emo: int = 0
    vee: bool = True
    ena: bool = True
    mode: VeeMode = VeeMode.MULTIPLICATIVE

    def __post_init__(self) -> None:
        object.__setattr__(self, "c_head", frozenset((int(layer), int(head)) for layer, head in self.c_head))
        object.__setattr__(self, "c_neuron", frozenset((int(layer), int(neuron)) for layer, neuron in self.c_neuron))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "mode", VeeMode(self.mode))
        if self.beta < 1.0:
            raise ValueError(f"beta must be at least 1, got {self.beta}")
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be at least 1, got {self.gamma}")

    def validate(self, config: ModelConfig) -> None:
        """
        Raises:
            IndexError: If a head, neuron or l_emo lies outside the model.
        """
        if not -1 <= self.l_emo < config.n_layers:
            raise IndexError(f"l_emo {self.l_emo} out of range [-1, {config.n_layers})")
        for layer, head in self.c_head:
            if not (0 <= layer < config.n_layers and 0 <= head < config.n_heads):
                raise IndexError(f"head ({layer}, {head}) outside the model")
        for layer, neuron in self.c_neuron:
            if not (0 <= layer < config.n_layers and 0 <= neuron < config.d_mlp):
                raise IndexError(f"neuron ({layer}, {neuron}) outside the model")

    @property
    def vee_active(self) -> bool:
        return self.vee and self.beta != 1.0 and bool(self.c_head)

    @property
    def ena_active(self) -> bool:
        return self.ena and self.gamma != 1.0 and bool(self.c_neuron)

    def replace(self, **changes: Any) -> "InterventionSpec":
        values = {
            "c_head": self.c_head,
            "c_neuron": self.c_neuron,
            "beta": self.beta,
            "gamma": self.gamma,
            "l_emo": self.l_emo,
            "vee": self.vee,
            "ena": self.ena,
            "mode": self.mode,
        }
        values.update(changes)
        return InterventionSpec(**values)

    def start(self, config: ModelConfig) -> "VeenaSession":
        self.validate(config)
        return VeenaSession(self, config)

    def to_dict(self) -> dict[str, Any]:
        return {
            "c_head": [list(h) for h in sorted(self.c_head)],
            "c_neuron": [list(n) for n in sorted(self.c_neuron)],
            "beta": self.beta,
            "gamma": self.gamma,
            "l_emo": self.l_emo,
            "flags": {"vee": self.vee, "ena": self.ena},
            "vee_mode": self.mode.value,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InterventionSpec":
        flags = data.get("flags", {})
        return cls(
            c_head=frozenset(tuple(h) for h in data.get("c_head", [])),
            c_neuron=frozenset(tuple(n) for n in data.get("c_neuron", [])),
            beta=float(data.get("beta", 2.0)),
            gamma=float(data.get("gamma", 1.5)),
            l_emo=int(data["l_emo"]),
            vee=bool(flags.get("vee", True)),
            ena=bool(flags.get("ena", True)),
            mode=VeeMode(data.get("vee_mode", VeeMode.MULTIPLICATIVE.value)),
        )


def vee_mask(
    spec: InterventionSpec,
    step: int,
    layer: int,
    head: int,
    roles: Sequence[TokenRole],
    query_positions: Sequence[int] | None = None,
) -> Array:
    """
    (len(query_positions), len(roles)) multiplier matrix of one head.

    `query_positions` defaults to every position at the prefill step (step 0) and to the newest
    position at a decode step. Entries are beta where the prefill or decode flow condition
    holds and 1 elsewhere; heads outside C_head, or a disabled VEE, give all ones.
    """
    n = len(roles)
    rows = tuple(range(n)) if step == 0 else (n - 1,)
    if query_positions is not None:
        rows = tuple(query_positions)
    mask = np.ones((len(rows), n))
    if not spec.vee or (layer, head) not in spec.c_head:
        return mask
    visual = np.array([role is TokenRole.VISUAL for role in roles])
    if step == 0 and layer <= spec.l_emo:
        for index, position in enumerate(rows):
            if roles[position] is TokenRole.QUERY:
                mask[index, visual] = spec.beta
    elif step > 0 and layer > spec.l_emo:
        for index, position in enumerate(rows):
            if position == n - 1:
                mask[index, visual] = spec.beta
    return mask


def apply_vee(scores: Array, mask: Array, *, additive: bool = False) -> Array:
    """
    Scale pre-softmax scores elementwise; causal -inf entries stay -inf.

    The multiplicative form is literal: a negative score times beta > 1 becomes more negative.
    """
    if scores.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    if additive:
        return scores + np.log(mask)
    return scores * mask


def neuron_multiplier(spec: InterventionSpec, layer: int, d_mlp: int) -> Array:
    multiplier = np.ones(d_mlp)
    if spec.ena:
        for neuron_layer, neuron in spec.c_neuron:
            if neuron_layer == layer:
                multiplier[neuron] = spec.gamma
    return multiplier


def apply_ena(activations: Array, spec: InterventionSpec, layer: int) -> Array:
    """Multiply coordinate u by gamma iff (layer, u) is in C_neuron."""
    return activations * neuron_multiplier(spec, layer, activations.shape[-1])


@dataclass(frozen=True)
class ProvenanceRecord:
    """
    One multiplier applied during a decode.

    `cells` lists (query position, key position) for attention records and the positions of
    the scaled rows for neuron records.
    """

    step: int
    layer: int
    kind: str
    index: int
    multiplier: float
    cells: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "layer": self.layer,
            "kind": self.kind,
            "index": self.index,
            "multiplier": self.multiplier,
            "cells": [list(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProvenanceRecord":
        return cls(
            step=int(data["step"]),
            layer=int(data["layer"]),
            kind=str(data["kind"]),
            index=int(data["index"]),
            multiplier=float(data["multiplier"]),
            cells=tuple(tuple(int(v) for v in c) for c in data["cells"]),
        )


class VeenaSession:
    """Per-decode application of one spec; collects a provenance record for every multiplier."""

    def __init__(self, spec: InterventionSpec, config: ModelConfig) -> None:
        self.spec = spec
        self.config = config
        self.additive = spec.mode is VeeMode.ADDITIVE
        self.provenance: list[ProvenanceRecord] = []
        self._heads_by_layer: dict[int, list[int]] = {}
        for layer, head in sorted(spec.c_head):
            self._heads_by_layer.setdefault(layer, []).append(head)
        self._neurons = {layer: neuron_multiplier(spec, layer, config.d_mlp) for layer, _ in spec.c_neuron}

    def attention_multiplier(
        self,
        layer: int,
        step: int,
        query_positions: Sequence[int],
        roles: Sequence[TokenRole],
        n_heads: int,
    ) -> Array | None:
        if not self.spec.vee_active or layer not in self._heads_by_layer:
            return None
        full = np.ones((n_heads, len(query_positions), len(roles)))
        applied = False
        for head in self._heads_by_layer[layer]:
            mask = vee_mask(self.spec, step, layer, head, roles, query_positions)
            cells = tuple(
                (int(query_positions[q]), int(k)) for q, k in zip(*np.nonzero(mask != 1.0), strict=True)
            )
            if not cells:
                continue
            full[head] = mask
            applied = True
            self.provenance.append(ProvenanceRecord(step, layer, "head", head, self.spec.beta, cells))
        return full if applied else None

    def neuron_multiplier(self, layer: int, step: int, query_positions: Sequence[int]) -> Array | None:
        if not self.spec.ena_active or layer not in self._neurons:
            return None
        rows = tuple((int(p),) for p in query_positions)
        for neuron_layer, neuron in sorted(self.spec.c_neuron):
            if neuron_layer == layer:
                self.provenance.append(ProvenanceRecord(step, layer, "neuron", neuron, self.spec.gamma, rows))
        return self._neurons[layer]


@dataclass
class ReplaySession:
    """Re-applies a provenance log cell by cell."""

    config: ModelConfig
    records: Sequence[ProvenanceRecord]
    additive: bool = False
    _heads: dict[tuple[int, int], list[ProvenanceRecord]] = field(default_factory=dict, init=False)
    _neurons: dict[tuple[int, int], list[ProvenanceRecord]] = field(default_factory=dict, init=False)

    def __post_init__(self) -> None:
        for record in self.records:
            target = self._heads if record.kind == "head" else self._neurons
            target.setdefault((record.step, record.layer), []).append(record)

    def start(self, config: ModelConfig) -> "ReplaySession":
        return ReplaySession(config, self.records, self.additive)

    def attention_multiplier(
        self,
        layer: int,
        step: int,
        query_positions: Sequence[int],
        roles: Sequence[TokenRole],
        n_heads: int,
    ) -> Array | None:
        records = self._heads.get((step, layer))
        if not records:
            return None
        rows = {int(p): i for i, p in enumerate(query_positions)}
        full = np.ones((n_heads, len(query_positions), len(roles)))
        for record in records:
            for query, key in record.cells:
                full[record.index, rows[query], key] = record.multiplier
        return full

    def neuron_multiplier(self, layer: int, step: int, query_positions: Sequence[int]) -> Array | None:
        records = self._neurons.get((step, layer))
        if not records:
            return None
        multiplier = np.ones(self.config.d_mlp)
        for record in records:
            multiplier[record.index] = record.multiplier
        return multiplier


@dataclass(frozen=True)
class VeenaResult:
    tokens: list[int]
    provenance: tuple[ProvenanceRecord, ...]


def run_veena(bundle: ModelBundle, input: InputSequence, spec: InterventionSpec, max_new: int = 8) -> VeenaResult:
    """
    Greedy decode with VEE and ENA active under their phase conditions.

    Returns the tokens and the provenance of every multiplier applied, in application order.
    """
    if spec.mode is VeeMode.ADDITIVE and spec.vee_active:
        warnings.warn(
            "additive VEE adds ln(beta) to scores instead of scaling them", AblationVariantWarning, stacklevel=2
        )
    session = spec.start(bundle.config)
    result = decode_steps(bundle, input, max_new, hooks=ForwardHooks(intervention=session))
    return VeenaResult(result.tokens, tuple(session.provenance))


def replay_veena(
    bundle: ModelBundle,
    input: InputSequence,
    records: Sequence[ProvenanceRecord],
    max_new: int = 8,
    *,
    additive: bool = False,
) -> list[int]:
    """Decode applying exactly the multipliers of a provenance log."""
    session = ReplaySession(bundle.config, records, additive)
    return decode_steps(bundle, input, max_new, hooks=ForwardHooks(intervention=session)).tokens


def save_spec(spec: InterventionSpec, path: str | Path) -> Path:
    return write_canonical(path, spec.to_dict())


def load_spec(path: str | Path) -> InterventionSpec:
    return InterventionSpec.from_dict(read_canonical(path))


def write_provenance(records: Iterable[ProvenanceRecord], path: str | Path) -> Path:
    """JSON-lines log, one canonical record per line."""
    return write_text_atomic(path, "".join(canonical_line(r.to_dict()) for r in records))


def read_provenance(path: str | Path) -> list[ProvenanceRecord]:
    with Path(path).open(encoding="utf-8") as handle:
        return [ProvenanceRecord.from_dict(json.loads(line)) for line in handle if line.strip()]
