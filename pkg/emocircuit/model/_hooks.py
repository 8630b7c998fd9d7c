"""
Hook points of the forward engine.

Every analysis in the package (patching, knockout, steering, gradient probes and the VEENA
intervention) drives the model through one `ForwardHooks` value. Hooks are plain data except
for taps, which receive an intermediate tensor and return the tensor that continues the pass.
"""

import dataclasses
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Protocol, runtime_checkable

import numpy as np
from numpy.typing import NDArray

from emocircuit.model._capture import CaptureFilter
from emocircuit.model._config import ModelConfig, TokenRole
from emocircuit.numerics import AdjointTape

Array = NDArray[np.float64]

TAP_POINTS = ("resid_pre", "key", "value", "probs", "neuron", "attn_out", "resid_post")

# tap(tensor, absolute positions of the rows in this pass) -> tensor
Tap = Callable[[Array, tuple[int, ...]], Array]


@runtime_checkable
class InterventionSession(Protocol):
    """Per-decode state of an attention and neuron scaling intervention."""

    additive: bool

    def attention_multiplier(
        self,
        layer: int,
        step: int,
        query_positions: Sequence[int],
        roles: Sequence[TokenRole],
        n_heads: int,
    ) -> Array | None:
        """(n_heads, len(query_positions), len(roles)) multipliers, or None when nothing applies."""
        ...

    def neuron_multiplier(self, layer: int, step: int, query_positions: Sequence[int]) -> Array | None:
        """(d_mlp,) multipliers for every row of this pass, or None when nothing applies."""
        ...


@runtime_checkable
class Intervention(Protocol):
    def start(self, config: ModelConfig) -> InterventionSession: ...


@dataclass(frozen=True)
class ResidualAddition:
    """Add `alpha * vector` to the post-block residual of `layer` at `positions` (None = all, decode included)."""

    layer: int
    vector: Array
    alpha: float = 1.0
    positions: frozenset[int] | None = None

    def __post_init__(self) -> None:
        vector = np.array(self.vector, dtype=np.float64, copy=True)
        vector.flags.writeable = False
        object.__setattr__(self, "vector", vector)
        object.__setattr__(self, "alpha", float(self.alpha))
        if self.positions is not None and not isinstance(self.positions, frozenset):
            object.__setattr__(self, "positions", frozenset(int(p) for p in self.positions))


def _empty() -> Mapping[Any, Any]:
    return MappingProxyType({})


@dataclass(frozen=True)
class ForwardHooks:
    """
    Overrides and observers for one forward or decode pass.

    Attributes:
        capture: Tensors to record into the returned trace.
        residual_set: Post-block residual overwrite per (layer, position).
        residual_add: Post-block additions, applied after `residual_set`. Additions that share a
            layer, vector and position set are merged by summing their coefficients first.
        head_set: Per-head output overwrite (pre-W_O) per (layer, head, position).
        head_zero: Heads whose output is zero at every position, decode steps included.
        key_set: Per-head key overwrite per (layer, head, position).
        value_set: Per-head value overwrite per (layer, head, position).
        neuron_set: Post-nonlinearity activation overwrite per (layer, position, neuron).
        intervention: Active attention and neuron scaling session.
        taps: Callbacks at named points, keyed (point, layer); see `TAP_POINTS`.
        tape: Tape for kernels whose inputs are tracked.
    """

    capture: CaptureFilter = field(default_factory=CaptureFilter)
    residual_set: Mapping[tuple[int, int], Array] = field(default_factory=_empty)
    residual_add: tuple[ResidualAddition, ...] = ()
    head_set: Mapping[tuple[int, int, int], Array] = field(default_factory=_empty)
    head_zero: frozenset[tuple[int, int]] = frozenset()
    key_set: Mapping[tuple[int, int, int], Array] = field(default_factory=_empty)
    value_set: Mapping[tuple[int, int, int], Array] = field(default_factory=_empty)
    neuron_set: Mapping[tuple[int, int, int], float] = field(default_factory=_empty)
    intervention: InterventionSession | None = None
    taps: Mapping[tuple[str, int], Tap] = field(default_factory=_empty)
    tape: AdjointTape | None = None

    def __post_init__(self) -> None:
        unknown = [key for key in self.taps if key[0] not in TAP_POINTS]
        if unknown:
            raise ValueError(f"unknown tap points {unknown}; expected one of {TAP_POINTS}")
        object.__setattr__(self, "residual_add", tuple(self.residual_add))
        object.__setattr__(self, "head_zero", frozenset(self.head_zero))

    def replace(self, **changes: Any) -> "ForwardHooks":
        return dataclasses.replace(self, **changes)

    def merge(self, other: "ForwardHooks") -> "ForwardHooks":
        """Union of two hook sets; on a conflicting cell `other` wins."""
        return ForwardHooks(
            capture=other.capture if not other.capture.is_empty else self.capture,
            residual_set={**self.residual_set, **other.residual_set},
            residual_add=self.residual_add + other.residual_add,
            head_set={**self.head_set, **other.head_set},
            head_zero=self.head_zero | other.head_zero,
            key_set={**self.key_set, **other.key_set},
            value_set={**self.value_set, **other.value_set},
            neuron_set={**self.neuron_set, **other.neuron_set},
            intervention=other.intervention if other.intervention is not None else self.intervention,
            taps={**self.taps, **other.taps},
            tape=other.tape if other.tape is not None else self.tape,
        )

    def layer_view(self, layer: int) -> "LayerHooks":
        return LayerHooks(
            residual_set={p: v for (l, p), v in self.residual_set.items() if l == layer},
            residual_add=tuple(a for a in self.residual_add if a.layer == layer),
            head_set={(h, p): v for (l, h, p), v in self.head_set.items() if l == layer},
            head_zero=frozenset(h for (l, h) in self.head_zero if l == layer),
            key_set={(h, p): v for (l, h, p), v in self.key_set.items() if l == layer},
            value_set={(h, p): v for (l, h, p), v in self.value_set.items() if l == layer},
            neuron_set={(p, u): v for (l, p, u), v in self.neuron_set.items() if l == layer},
            taps={point: fn for (point, l), fn in self.taps.items() if l == layer},
        )


@dataclass(frozen=True)
class LayerHooks:
    """The hooks of `ForwardHooks` that concern one layer, re-keyed without the layer index."""

    residual_set: Mapping[int, Array]
    residual_add: tuple[ResidualAddition, ...]
    head_set: Mapping[tuple[int, int], Array]
    head_zero: frozenset[int]
    key_set: Mapping[tuple[int, int], Array]
    value_set: Mapping[tuple[int, int], Array]
    neuron_set: Mapping[tuple[int, int], float]
    taps: Mapping[str, Tap]
