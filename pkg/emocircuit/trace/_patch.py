from collections.abc import Iterable, Iterator
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import DegenerateContrastError, IncompleteDonorError, PatchSpecError
from emocircuit.model import (
    ActivationTrace,
    CaptureFilter,
    ForwardHooks,
    InputSequence,
    ModelBundle,
    ModelConfig,
    TokenRole,
    forward,
)

Array = NDArray[np.float64]

CONTRAST_THRESHOLD = 1e-9


def _positions(values: Iterable[int] | None) -> tuple[int, ...] | None:
    if values is None:
        return None
    return tuple(sorted({int(p) for p in values}))


@dataclass(frozen=True)
class ResidualAt:
    """Post-block residual of `layer` at explicit positions."""

    layer: int
    positions: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", _positions(self.positions))


@dataclass(frozen=True)
class HeadOutput:
    """
    One head's output (before W_O).

    `positions=None` covers every position, decode steps included. With `zero=True` the
    output is replaced by zeros instead of donor values.
    """

    layer: int
    head: int
    positions: tuple[int, ...] | None = None
    zero: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", _positions(self.positions))


@dataclass(frozen=True)
class NeuronActivation:
    layer: int
    neuron: int
    positions: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", _positions(self.positions))


@dataclass(frozen=True)
class TokenGroup:
    """Residual of every position with `role`, at every layer of `layers`."""

    role: TokenRole
    layers: range

    def __post_init__(self) -> None:
        if isinstance(self.layers, tuple):
            object.__setattr__(self, "layers", range(*self.layers))


PatchTarget = ResidualAt | HeadOutput | NeuronActivation | TokenGroup

# (family, layer, position, index); index is the head or neuron, -1 for residual rows
Cell = tuple[str, int, int, int]


@dataclass(frozen=True)
class PatchSpec:
    targets: tuple[PatchTarget, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))

    @classmethod
    def of(cls, *targets: PatchTarget) -> "PatchSpec":
        return cls(tuple(targets))

    def __len__(self) -> int:
        return len(self.targets)

    def __add__(self, other: "PatchSpec") -> "PatchSpec":
        return PatchSpec(self.targets + other.targets)

    def cells(self, config: ModelConfig, input: InputSequence) -> Iterator[Cell]:
        """Every (family, layer, position, index) cell the spec touches within the input length."""
        for target in self.targets:
            if isinstance(target, ResidualAt):
                for position in target.positions:
                    yield ("residual", target.layer, position, -1)
            elif isinstance(target, TokenGroup):
                for layer in target.layers:
                    for position in input.positions(target.role):
                        yield ("residual", layer, position, -1)
            elif isinstance(target, HeadOutput):
                positions = target.positions if target.positions is not None else range(input.length)
                for position in positions:
                    yield ("head_out", target.layer, position, target.head)
            else:
                for position in target.positions:
                    yield ("neuron", target.layer, position, target.neuron)

    def validate(self, config: ModelConfig, input: InputSequence) -> None:
        """
        Raises:
            PatchSpecError: If an index is out of bounds or two targets share a cell.
        """
        for target in self.targets:
            layers = target.layers if isinstance(target, TokenGroup) else range(target.layer, target.layer + 1)
            if layers and not (0 <= layers[0] < config.n_layers and 0 <= layers[-1] < config.n_layers):
                raise PatchSpecError(f"{target} names a layer outside [0, {config.n_layers})")
            if isinstance(target, HeadOutput) and not 0 <= target.head < config.n_heads:
                raise PatchSpecError(f"{target} names a head outside [0, {config.n_heads})")
            if isinstance(target, NeuronActivation) and not 0 <= target.neuron < config.d_mlp:
                raise PatchSpecError(f"{target} names a neuron outside [0, {config.d_mlp})")
            positions = getattr(target, "positions", None) or ()
            if any(not 0 <= p < config.max_seq for p in positions):
                raise PatchSpecError(f"{target} names a position outside [0, {config.max_seq})")
        seen: set[Cell] = set()
        for cell in self.cells(config, input):
            if cell in seen:
                raise PatchSpecError(f"targets overlap at {cell}")
            seen.add(cell)

    def required_capture(self) -> CaptureFilter:
        """The smallest capture filter whose trace can serve as a donor for this spec."""
        residual = any(isinstance(t, (ResidualAt, TokenGroup)) for t in self.targets)
        heads = any(isinstance(t, HeadOutput) and not t.zero for t in self.targets)
        neurons = any(isinstance(t, NeuronActivation) for t in self.targets)
        layers: set[int] = set()
        for target in self.targets:
            if isinstance(target, TokenGroup):
                layers.update(target.layers)
            elif not (isinstance(target, HeadOutput) and target.zero):
                layers.add(target.layer)
        return CaptureFilter(residual=residual, head_output=heads, neuron=neurons, layers=frozenset(layers))


def patch_hooks(
    spec: PatchSpec, donor: ActivationTrace | None, input: InputSequence, config: ModelConfig
) -> ForwardHooks:
    """
    Translate a patch spec into forward hooks.

    Donor cells beyond the donor length (decode positions) are left to normal computation.

    Raises:
        PatchSpecError: On invalid targets or a donor whose length differs from the input.
        IncompleteDonorError: If the donor lacks a named cell.
    """
    spec.validate(config, input)
    needs_donor = any(not (isinstance(t, HeadOutput) and t.zero) for t in spec.targets)
    if needs_donor:
        if donor is None:
            raise PatchSpecError("a donor trace is required for non-zero patch targets")
        if donor.length != input.length:
            raise PatchSpecError(f"donor length {donor.length} differs from input length {input.length}")
    residual_set: dict[tuple[int, int], Array] = {}
    head_set: dict[tuple[int, int, int], Array] = {}
    head_zero: set[tuple[int, int]] = set()
    neuron_set: dict[tuple[int, int, int], float] = {}

    def donor_cell(family: str, key: tuple[int, ...]) -> Array:
        assert donor is not None
        if not donor.has(family, key):
            raise IncompleteDonorError(family, key)
        return donor.cells(family)[key]

    for target in spec.targets:
        if isinstance(target, HeadOutput) and target.zero:
            if target.positions is None:
                head_zero.add((target.layer, target.head))
            else:
                for position in target.positions:
                    head_set[(target.layer, target.head, position)] = np.zeros(config.d_head)
            continue
        limit = input.length
        for family, layer, position, index in PatchSpec.of(target).cells(config, input):
            if position >= limit:
                continue
            if family == "residual":
                residual_set[(layer, position)] = donor_cell("residual", (layer, position))
            elif family == "head_out":
                head_set[(layer, index, position)] = donor_cell("head_out", (layer, index, position))
            else:
                neuron_set[(layer, position, index)] = float(donor_cell("neuron", (layer, position))[index])
    return ForwardHooks(
        residual_set=residual_set, head_set=head_set, head_zero=frozenset(head_zero), neuron_set=neuron_set
    )


def run_with_capture(
    bundle: ModelBundle, input: InputSequence, filter: CaptureFilter | None = None
) -> tuple[Array, ActivationTrace]:
    """Forward pass recording the tensors `filter` names; logits equal an uncaptured pass bit-for-bit."""
    return forward(bundle, input, filter or CaptureFilter())


def run_with_patches(
    bundle: ModelBundle,
    input: InputSequence,
    donor: ActivationTrace | None,
    spec: PatchSpec,
    filter: CaptureFilter | None = None,
    *,
    hooks: ForwardHooks | None = None,
) -> tuple[Array, ActivationTrace]:
    """
    Forward pass with the cells of `spec` overwritten from `donor`.

    Each cell is replaced at the moment it is produced, so every downstream consumer reads the
    patched value. An empty spec gives the same result as `run_with_capture`.
    """
    patched = patch_hooks(spec, donor, input, bundle.config)
    if hooks is not None:
        patched = hooks.merge(patched)
    return forward(bundle, input, filter or CaptureFilter(), hooks=patched)


def logit_difference(logits: Array, y_plus: int, y_minus: int) -> float:
    """
    Logit(y_plus) - Logit(y_minus) at the Last position.

    Accepts a single logit vector or a (length, vocab) matrix, whose last row is used.

    Raises:
        IndexError: If either id is outside the vocabulary.
    """
    row = np.asarray(logits, dtype=np.float64)
    if row.ndim == 2:
        row = row[-1]
    vocab = row.shape[0]
    for token in (y_plus, y_minus):
        if not 0 <= int(token) < vocab:
            raise IndexError(f"token id {token} out of range [0, {vocab})")
    return float(row[int(y_plus)] - row[int(y_minus)])


def causal_effect(
    bundle: ModelBundle,
    x_plus: InputSequence,
    x_minus: InputSequence,
    component: PatchTarget | PatchSpec,
    y_plus: int,
    y_minus: int,
) -> float:
    """
    Normalized effect of patching `component` from X+ onto X-.

    Returns (F_patch - F(X-)) / (F(X+) - F(X-)) with F the logit difference at the Last position.
    A PatchSpec with several targets patches them jointly.

    Raises:
        DegenerateContrastError: If |F(X+) - F(X-)| is below 1e-9.
    """
    spec = component if isinstance(component, PatchSpec) else PatchSpec.of(component)
    logits_plus, donor = forward(bundle, x_plus, spec.required_capture())
    logits_minus, _ = forward(bundle, x_minus)
    f_plus = logit_difference(logits_plus, y_plus, y_minus)
    f_minus = logit_difference(logits_minus, y_plus, y_minus)
    denominator = f_plus - f_minus
    if abs(denominator) < CONTRAST_THRESHOLD:
        raise DegenerateContrastError(denominator, CONTRAST_THRESHOLD)
    patched_logits, _ = run_with_patches(bundle, x_minus, donor, spec)
    return (logit_difference(patched_logits, y_plus, y_minus) - f_minus) / denominator


def union_of_residuals(spec: PatchSpec, config: ModelConfig, input: InputSequence) -> PatchSpec:
    """Rewrite every residual cell of `spec` as explicit `ResidualAt` targets, one per layer."""
    by_layer: dict[int, list[int]] = {}
    others: list[PatchTarget] = []
    for target in spec.targets:
        if isinstance(target, (ResidualAt, TokenGroup)):
            for _, layer, position, _ in PatchSpec.of(target).cells(config, input):
                by_layer.setdefault(layer, []).append(position)
        else:
            others.append(target)
    explicit: list[PatchTarget] = [ResidualAt(layer, tuple(ps)) for layer, ps in sorted(by_layer.items())]
    return PatchSpec(tuple(explicit + others))

