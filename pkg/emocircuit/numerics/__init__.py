"""Dense kernels, seeded randomness and the reverse-mode tape."""

from emocircuit.numerics._kernels import (
    LAYER_NORM_EPS,
    Tensor2,
    add,
    causal_fill,
    cosine_sim,
    dot,
    entropy,
    gelu,
    layer_norm,
    matmul,
    multiply,
    replace_row,
    reshape,
    scale,
    softmax_rows,
    take_row,
    transpose,
)
from emocircuit.numerics._rng import derive_seed, seeded_rng
from emocircuit.numerics._tape import AdjointTape, GradientMap, TapeRecord, backward

__all__ = [
    "LAYER_NORM_EPS",
    "AdjointTape",
    "GradientMap",
    "TapeRecord",
    "Tensor2",
    "add",
    "backward",
    "causal_fill",
    "cosine_sim",
    "derive_seed",
    "dot",
    "entropy",
    "gelu",
    "layer_norm",
    "matmul",
    "multiply",
    "replace_row",
    "reshape",
    "scale",
    "seeded_rng",
    "softmax_rows",
    "take_row",
    "transpose",
]
