"""Reverse-mode adjoint tape with scoped capture."""

from collections.abc import Callable, Iterator
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import InvalidHandleError, TapeError

Array = NDArray[np.float64]
Vjp = Callable[[Array], tuple[Array | None, ...]]


@dataclass(frozen=True)
class TapeRecord:
    """One primitive operation as it ran during the forward pass."""

    name: str
    inputs: tuple[Any, ...]
    output: Array
    forward: Callable[..., Array]
    vjp: Vjp


class AdjointTape:
    """
    Ordered record of primitive operations from one forward computation.

    Only operations with at least one tracked input are recorded, so a tape attached to a
    whole forward pass stores nothing until a leaf is registered with `watch`. Arrays are
    identified by object identity; the tape keeps a reference to every array it has seen,
    which keeps those identities unique for the tape's lifetime.

    A tape belongs to the pass that created it and is not thread safe.
    """

    def __init__(self) -> None:
        self._records: list[TapeRecord] = []
        self._tracked: dict[int, Any] = {}
        self._leaves: list[Array] = []

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[TapeRecord]:
        return iter(self._records)

    @property
    def leaves(self) -> tuple[Array, ...]:
        return tuple(self._leaves)

    def watch(self, array: Array) -> Array:
        """Register `array` as a differentiable leaf and return it unchanged."""
        if not isinstance(array, np.ndarray):
            raise TypeError(f"only numpy arrays can be watched, got {type(array)}")
        if id(array) not in self._tracked:
            self._tracked[id(array)] = array
            self._leaves.append(array)
        return array

    def is_tracked(self, value: Any) -> bool:
        return id(value) in self._tracked and self._tracked[id(value)] is value

    def record(
        self,
        name: str,
        inputs: tuple[Any, ...],
        output: Array,
        forward: Callable[..., Array],
        vjp: Vjp,
    ) -> None:
        if not any(self.is_tracked(value) for value in inputs):
            return
        self._tracked[id(output)] = output
        self._records.append(TapeRecord(name=name, inputs=inputs, output=output, forward=forward, vjp=vjp))

    def replay(self) -> list[Array]:
        """Re-execute every recorded operation from the leaves and return the outputs in order."""
        replayed: dict[int, Array] = {}
        outputs: list[Array] = []
        for record in self._records:
            args = tuple(replayed.get(id(value), value) if self.is_tracked(value) else value for value in record.inputs)
            value = record.forward(*args)
            replayed[id(record.output)] = value
            outputs.append(value)
        return outputs


class GradientMap:
    """Gradients of one scalar with respect to every tracked intermediate of a tape."""

    def __init__(self, tape: AdjointTape, grads: dict[int, Array]) -> None:
        self._tape = tape
        self._grads = grads

    def __contains__(self, value: object) -> bool:
        return id(value) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def wrt(self, value: Array) -> Array:
        """Gradient with respect to `value`; zeros when it is tracked but does not reach the seed."""
        if not self._tape.is_tracked(value):
            raise InvalidHandleError("array is not recorded on this tape")
        grad = self._grads.get(id(value))
        if grad is None:
            return np.zeros_like(value, dtype=np.float64)
        return grad


def backward(tape: AdjointTape, seed: Array) -> GradientMap:
    """
    Reverse sweep from a scalar output.

    Every record is visited once, in strict reverse order. Gradients of inputs that are not
    tracked are discarded.

    Raises:
        InvalidHandleError: If `seed` was not produced on `tape`.
        TapeError: If an operation's adjoint fails.
    """
    if not tape.is_tracked(seed):
        raise InvalidHandleError("seed is not an output recorded on this tape")
    if np.ndim(seed) != 0:
        raise InvalidHandleError(f"seed must be a scalar, got shape {np.shape(seed)}")

    grads: dict[int, Array] = {id(seed): np.ones_like(seed, dtype=np.float64)}
    for record in reversed(list(tape)):
        upstream = grads.get(id(record.output))
        if upstream is None:
            continue
        try:
            input_grads = record.vjp(upstream)
        except (ValueError, FloatingPointError) as e:
            raise TapeError(f"adjoint of {record.name} failed: {e}") from e
        if len(input_grads) != len(record.inputs):
            raise TapeError(f"adjoint of {record.name} returned {len(input_grads)} gradients")
        for value, grad in zip(record.inputs, input_grads, strict=True):
            if grad is None or not tape.is_tracked(value):
                continue
            key = id(value)
            grads[key] = grad if key not in grads else grads[key] + grad
    return GradientMap(tape, grads)
