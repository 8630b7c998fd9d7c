"""The toy multimodal decoder: configuration, weights, forward pass and greedy decoding."""

from emocircuit.model._capture import FAMILIES, ActivationTrace, CaptureFilter
from emocircuit.model._config import InputSequence, ModelConfig, Phase, TokenRole
from emocircuit.model._forward import (
    DecodeResult,
    DecodeState,
    PartialResult,
    decode_steps,
    embed,
    embed_token,
    forward,
    forward_from,
    greedy_decode,
    unembed,
)
from emocircuit.model._hooks import (
    TAP_POINTS,
    ForwardHooks,
    Intervention,
    InterventionSession,
    ResidualAddition,
    Tap,
)
from emocircuit.model._weights import (
    WEIGHT_MAGIC,
    LayerWeights,
    ModelBundle,
    ModelWeights,
    encode_weights,
    expected_shapes,
    init_random,
    load_weights,
    save_weights,
    zero_weights,
)

__all__ = [
    "FAMILIES",
    "TAP_POINTS",
    "WEIGHT_MAGIC",
    "ActivationTrace",
    "CaptureFilter",
    "DecodeResult",
    "DecodeState",
    "ForwardHooks",
    "InputSequence",
    "Intervention",
    "InterventionSession",
    "LayerWeights",
    "ModelBundle",
    "ModelConfig",
    "ModelWeights",
    "PartialResult",
    "Phase",
    "ResidualAddition",
    "Tap",
    "TokenRole",
    "decode_steps",
    "embed",
    "embed_token",
    "encode_weights",
    "expected_shapes",
    "forward",
    "forward_from",
    "greedy_decode",
    "init_random",
    "load_weights",
    "save_weights",
    "unembed",
    "zero_weights",
]
