"""Capture filters and the immutable activation trace produced by a forward pass."""

from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from types import MappingProxyType
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import IncompleteTraceError
from emocircuit.model._config import ModelConfig
from emocircuit.numerics import causal_fill, softmax_rows

Array = NDArray[np.float64]

FAMILIES = ("residual", "head_out", "scores", "neuron", "attn_out", "head_value")


@dataclass(frozen=True)
class CaptureFilter:
    """
    Which tensors a forward pass records.

    Attributes:
        residual: Residual stream per (layer, position), after the full block. Also records the
            embedded input rows that enter block 0.
        head_output: Per-head attention output per (layer, head, position), before W_O.
        scores: Raw pre-softmax score matrix per (layer, head), before any intervention.
        neuron: Post-nonlinearity MLP activations per (layer, position).
        attn_out: Attention output after W_O per (layer, position).
        head_value: Per-head value vectors per (layer, head, position).
        layers: Optional layer restriction; None records every layer.
        positions: Optional position restriction; None records every position.
    """

    residual: bool = False
    head_output: bool = False
    scores: bool = False
    neuron: bool = False
    attn_out: bool = False
    head_value: bool = False
    layers: frozenset[int] | None = None
    positions: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if self.layers is not None and not isinstance(self.layers, frozenset):
            object.__setattr__(self, "layers", frozenset(int(x) for x in self.layers))
        if self.positions is not None and not isinstance(self.positions, frozenset):
            object.__setattr__(self, "positions", frozenset(int(x) for x in self.positions))

    @classmethod
    def full(cls, layers: Iterable[int] | None = None, positions: Iterable[int] | None = None) -> "CaptureFilter":
        return cls(
            residual=True,
            head_output=True,
            scores=True,
            neuron=True,
            attn_out=True,
            head_value=True,
            layers=None if layers is None else frozenset(layers),
            positions=None if positions is None else frozenset(positions),
        )

    @classmethod
    def none(cls) -> "CaptureFilter":
        return cls()

    @property
    def is_empty(self) -> bool:
        return not (self.residual or self.head_output or self.scores or self.neuron or self.attn_out or self.head_value)

    def wants_layer(self, layer: int) -> bool:
        return not self.is_empty and (self.layers is None or layer in self.layers)

    def wants_position(self, position: int) -> bool:
        return self.positions is None or position in self.positions


def _readonly(array: Array) -> Array:
    frozen = np.array(array, dtype=np.float64, copy=True)
    frozen.flags.writeable = False
    return frozen


class ActivationTrace:
    """
    Activations recorded during one forward pass, keyed by cell.

    Keys are `(layer, position)` for residual, neuron and attn_out cells, `(layer, head, position)`
    for head_out and head_value cells, and `(layer, head)` for score matrices. Stored arrays are
    read-only copies; the trace never changes after the pass that produced it.
    """

    def __init__(
        self,
        config: ModelConfig,
        fingerprint: str,
        length: int,
        cells: Mapping[str, Mapping[tuple[int, ...], Array]],
        embedded: Mapping[int, Array] | None = None,
    ) -> None:
        self._config = config
        self._fingerprint = fingerprint
        self._length = length
        self._cells: dict[str, MappingProxyType[tuple[int, ...], Array]] = {}
        for family in FAMILIES:
            stored = {tuple(int(i) for i in key): _readonly(value) for key, value in cells.get(family, {}).items()}
            self._cells[family] = MappingProxyType(stored)
        self._embedded = MappingProxyType({int(p): _readonly(v) for p, v in (embedded or {}).items()})

    def __repr__(self) -> str:
        counts = ", ".join(f"{family}={len(self._cells[family])}" for family in FAMILIES)
        return f"ActivationTrace(length={self._length}, {counts})"

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    @property
    def length(self) -> int:
        return self._length

    @property
    def is_empty(self) -> bool:
        return not self._embedded and all(not cells for cells in self._cells.values())

    def cells(self, family: str) -> Mapping[tuple[int, ...], Array]:
        """Read-only view of every recorded cell of one family."""
        if family not in self._cells:
            raise KeyError(f"unknown trace family {family!r}; expected one of {FAMILIES}")
        return self._cells[family]

    @property
    def embedded_rows(self) -> Mapping[int, Array]:
        return self._embedded

    def has(self, family: str, key: tuple[int, ...]) -> bool:
        return tuple(key) in self.cells(family)

    def _get(self, family: str, key: tuple[int, ...]) -> Array:
        try:
            return self._cells[family][key]
        except KeyError:
            raise IncompleteTraceError(f"trace has no {family} cell at {key}") from None

    def residual(self, layer: int, position: int) -> Array:
        return self._get("residual", (layer, position))

    def head_out(self, layer: int, head: int, position: int) -> Array:
        return self._get("head_out", (layer, head, position))

    def scores(self, layer: int, head: int) -> Array:
        return self._get("scores", (layer, head))

    def neuron(self, layer: int, position: int) -> Array:
        return self._get("neuron", (layer, position))

    def attn_out(self, layer: int, position: int) -> Array:
        return self._get("attn_out", (layer, position))

    def head_value(self, layer: int, head: int, position: int) -> Array:
        return self._get("head_value", (layer, head, position))

    def embedded(self, position: int) -> Array:
        """Residual row entering block 0 (visual rows exactly as supplied)."""
        try:
            return self._embedded[position]
        except KeyError:
            raise IncompleteTraceError(f"trace has no embedded row at position {position}") from None

    def residual_matrix(self, layer: int) -> Array:
        """Post-block residual of every position at `layer` as a (length, d_model) matrix."""
        return np.stack([self.residual(layer, p) for p in range(self._length)])

    def attention_probs(self, layer: int, head: int) -> Array:
        """Causally masked softmax of the recorded raw scores, without any intervention."""
        raw = self.scores(layer, head)
        n = raw.shape[0]
        return softmax_rows(causal_fill(raw, np.tril(np.ones((n, n), dtype=bool))))

    def to_dict(self) -> dict[str, Any]:
        return {
            "fingerprint": self._fingerprint,
            "length": self._length,
            "cells": {family: len(self._cells[family]) for family in FAMILIES},
        }
