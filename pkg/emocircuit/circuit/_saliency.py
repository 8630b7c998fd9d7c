from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from emocircuit.circuit._restoration import steering_vector
from emocircuit.model import ForwardHooks, InputSequence, ModelBundle, Tap, TokenRole, embed, forward_from
from emocircuit.numerics import AdjointTape, backward, cosine_sim, take_row
from emocircuit.steering import ContrastivePair, SteeringSet

Array = NDArray[np.float64]

# flow name -> (key role, query role)
FLOWS: dict[str, tuple[TokenRole, TokenRole]] = {
    "V->Q": (TokenRole.VISUAL, TokenRole.QUERY),
    "Q->L": (TokenRole.QUERY, TokenRole.LAST),
    "V->L": (TokenRole.VISUAL, TokenRole.LAST),
}


def flow_sums(matrix: Array, roles: Sequence[TokenRole]) -> dict[str, float]:
    """Sum of the (query, key) cells of `matrix` whose roles match each flow."""
    codes = np.array([r.value for r in roles])
    result = {}
    for name, (key_role, query_role) in FLOWS.items():
        mask = (codes[:, None] == query_role.value) & (codes[None, :] == key_role.value)
        result[name] = float(np.sum(matrix[mask]))
    return result


@dataclass(frozen=True)
class SaliencyMap:
    """
    Attention probability times dI/d(probability) for every head of layers 0..critical_layer.

    Attributes:
        cells: (n_heads, length, length) saliency per layer.
        flows: Per layer, V->Q, Q->L and V->L sums over all heads.
        normalized: Each flow divided by its largest absolute value over layers (0 when all are 0).
        side: Input the metric was computed on ("negative" or "positive").
    """

    critical_layer: int
    roles: tuple[TokenRole, ...]
    cells: Mapping[int, Array]
    flows: Mapping[int, Mapping[str, float]]
    normalized: Mapping[int, Mapping[str, float]]
    side: str

    def head(self, layer: int, head: int) -> Array:
        return self.cells[layer][head]

    def flow(self, layer: int, name: str) -> float:
        return self.flows[layer][name]

    def peak_layer(self, name: str) -> int:
        """Layer with the largest flow `name`; ties go to the lowest layer."""
        return max(sorted(self.flows), key=lambda layer: self.flows[layer][name])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for layer in sorted(self.flows):
            for name in FLOWS:
                rows.append(
                    {
                        "layer": layer,
                        "flow": name,
                        "raw": self.flows[layer][name],
                        "normalized": self.normalized[layer][name],
                    }
                )
        return pd.DataFrame(rows, columns=["layer", "flow", "raw", "normalized"])

    def to_dict(self) -> dict[str, Any]:
        return {
            "critical_layer": self.critical_layer,
            "side": self.side,
            "flows": {str(layer): dict(values) for layer, values in sorted(self.flows.items())},
            "normalized": {str(layer): dict(values) for layer, values in sorted(self.normalized.items())},
        }


def _normalize(flows: Mapping[int, Mapping[str, float]]) -> dict[int, dict[str, float]]:
    peaks = {name: max((abs(values[name]) for values in flows.values()), default=0.0) for name in FLOWS}
    return {
        layer: {name: values[name] / peaks[name] if peaks[name] > 0 else 0.0 for name in FLOWS}
        for layer, values in flows.items()
    }


def saliency_of_input(
    bundle: ModelBundle,
    input: InputSequence,
    critical_layer: int,
    steering: SteeringSet | Array,
    *,
    side: str = "negative",
) -> SaliencyMap:
    """
    Saliency of every attention cell for I on `critical_layer`, computed on `input`.

    Raises:
        DegenerateVectorError: If the steering vector or the attention output is zero.
    """
    config = bundle.config
    if not 0 <= critical_layer < config.n_layers:
        raise IndexError(f"critical layer {critical_layer} out of range [0, {config.n_layers})")
    vector = steering_vector(steering, critical_layer)
    tape = AdjointTape()
    watched: dict[int, Array] = {}

    def watch_probs(layer: int) -> Tap:
        def tap(probs: Array, positions: tuple[int, ...]) -> Array:
            watched[layer] = tape.watch(probs)
            return probs

        return tap

    taps = {("probs", layer): watch_probs(layer) for layer in range(critical_layer + 1)}
    result = forward_from(
        bundle,
        input,
        embed(bundle, input),
        0,
        hooks=ForwardHooks(taps=taps, tape=tape),
        stop_layer=critical_layer,
    )
    intention = cosine_sim(take_row(result.attn_out, input.last_position, tape=tape), vector, tape=tape)
    grads = backward(tape, intention)
    cells = {layer: watched[layer] * grads.wrt(watched[layer]) for layer in sorted(watched)}
    for matrix in cells.values():
        matrix.flags.writeable = False
    roles = input.roles
    flows = {layer: flow_sums(np.sum(matrix, axis=0), roles) for layer, matrix in cells.items()}
    return SaliencyMap(critical_layer, roles, cells, flows, _normalize(flows), side)


def saliency(
    bundle: ModelBundle,
    pair: ContrastivePair,
    critical_layer: int,
    steering: SteeringSet | Array,
    *,
    side: str = "negative",
) -> SaliencyMap:
    """
    Gradient-weighted attention flow for one pair.

    The metric is I on the attention output of `critical_layer` at the Last position. With
    `side="negative"` it is computed on X-; `side="positive"` uses X+, where the emotional
    flow is active.
    """
    if side not in ("negative", "positive"):
        raise ValueError(f"side must be 'negative' or 'positive', got {side!r}")
    input = pair.x_minus if side == "negative" else pair.x_plus
    return saliency_of_input(bundle, input, critical_layer, steering, side=side)
