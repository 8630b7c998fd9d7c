"""Exceptions and warning categories for emocircuit."""

from collections.abc import Mapping
from typing import Any


class EmoCircuitError(Exception):
    """Base exception for all emocircuit errors."""


class DataError(EmoCircuitError):
    """Base for malformed or inconsistent input data (weights, datasets, labels, reports)."""


class NumericError(EmoCircuitError):
    """Base for numerically undefined results (degenerate vectors, contrasts, ratios)."""


class ModelConfigError(EmoCircuitError, ValueError):
    """Raised when a ModelConfig violates its invariants."""


class ShapeError(EmoCircuitError):
    """Raised when tensor dimensions do not line up."""

    def __init__(self, operation: str, *shapes: tuple[int, ...], message: str | None = None) -> None:
        self.operation = operation
        self.shapes = shapes
        if message is None:
            joined = " x ".join(str(shape) for shape in shapes)
            message = f"{operation}: incompatible shapes {joined}"
        super().__init__(message)


class InvalidHandleError(EmoCircuitError):
    """Raised when a gradient seed or query is not an intermediate recorded on the tape."""


class TapeError(EmoCircuitError):
    """Raised when a reverse sweep cannot be completed."""


class SequenceLengthError(EmoCircuitError):
    """Raised when an input does not fit the model context."""

    def __init__(self, length: int, max_seq: int) -> None:
        self.length = length
        self.max_seq = max_seq
        super().__init__(f"sequence length {length} exceeds max_seq {max_seq}")


class PatchSpecError(EmoCircuitError):
    """Raised when patch targets are out of bounds or overlap."""


class IncompleteDonorError(EmoCircuitError):
    """Raised when a donor trace lacks a cell that a patch needs."""

    def __init__(self, family: str, key: tuple[int, ...], message: str | None = None) -> None:
        self.family = family
        self.key = key
        if message is None:
            message = f"donor trace has no {family} cell at {key}"
        super().__init__(message)


class IncompleteTraceError(EmoCircuitError):
    """Raised when a trace lacks activations an analysis reads."""


class WeightFormatError(DataError):
    """Raised when a weight or matrix file is corrupt or inconsistent with its header."""


class DatasetFormatError(DataError):
    """Raised when a dataset file violates the contrastive-pair contract."""


class PairError(DataError):
    """Raised when a contrastive pair's inputs do not share text and length."""

    def __init__(self, pair_id: str, message: str) -> None:
        self.pair_id = pair_id
        super().__init__(f"pair {pair_id}: {message}")


class LabelCoverageError(DataError):
    """Raised when a ground-truth label cannot be mapped under some wheel."""

    def __init__(self, label: str, wheel_id: str) -> None:
        self.label = label
        self.wheel_id = wheel_id
        super().__init__(f"label {label!r} is not mappable under wheel {wheel_id!r}")


class MetricInputError(DataError):
    """Raised when metric inputs are malformed (length mismatch, unknown polarity)."""


class ReportError(DataError):
    """Raised when results cannot be written as a canonical report."""


class DegenerateVectorError(NumericError):
    """Raised when a cosine is requested for a zero-norm vector."""


class DegenerateContrastError(NumericError):
    """Raised when a normalized effect has a vanishing denominator."""

    def __init__(self, denominator: float, threshold: float = 1e-9, message: str | None = None) -> None:
        self.denominator = denominator
        self.threshold = threshold
        if message is None:
            message = f"contrast denominator {denominator:.3e} is below {threshold:.0e}"
        super().__init__(message)


class NoValidPairsError(NumericError):
    """Raised when no contrastive pair passes the hit-rate threshold."""

    def __init__(self, emotion: str, tau: float, hit_rates: Mapping[str, float]) -> None:
        self.emotion = emotion
        self.tau = tau
        self.hit_rates = dict(hit_rates)
        best = max(self.hit_rates.values(), default=0.0)
        super().__init__(
            f"no pair for {emotion!r} has hit rate above tau={tau} "
            f"({len(self.hit_rates)} pairs evaluated, best {best:.3f})"
        )


class UndefinedRatioError(NumericError):
    """Raised when a change ratio is requested against a zero baseline."""

    def __init__(self, new_value: float | None = None, message: str | None = None) -> None:
        self.new_value = new_value
        if message is None:
            message = "change ratio is undefined for a zero baseline hit rate"
            if new_value is not None:
                message += f" (post-intervention hit rate {new_value:.4f})"
        super().__init__(message)


class PlantConstructionError(NumericError):
    """Raised when the planted circuit misses its acceptance gates after every retry."""

    def __init__(self, attempts: int, gates: Mapping[str, Any]) -> None:
        self.attempts = attempts
        self.gates = dict(gates)
        failing = ", ".join(f"{name}={value}" for name, value in sorted(self.gates.items()))
        super().__init__(f"planted circuit failed its gates after {attempts} attempts: {failing}")


class DegeneratePairsSkippedWarning(UserWarning):
    """Some pairs had a vanishing restoration contrast and were left out of a head's mean."""


class PlantRetryWarning(UserWarning):
    """The planted-model builder scaled its wiring strength and tried again."""


class AblationVariantWarning(UserWarning):
    """An ablation variant that departs from the reference formulation was selected."""


class AnalysisSplitUnfilteredWarning(UserWarning):
    """The analysis split is used without hit-rate filtering."""
