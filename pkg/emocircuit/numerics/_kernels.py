"""
Dense kernels for the toy transformer.

Every kernel takes an optional `tape`. When a tape is given and one of the inputs is tracked
on it, the kernel records itself together with its vector-Jacobian product; otherwise it is a
plain numpy computation. All kernels return fresh arrays and never write to their inputs.
"""

import math

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import DegenerateVectorError, ShapeError
from emocircuit.numerics._tape import AdjointTape

Array = NDArray[np.float64]
Tensor2 = NDArray[np.float64]

LAYER_NORM_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715
_CHUNK = 1 << 15


def _ordered_matmul(a: Array, b: Array) -> Array:
    # strictly left-to-right over the inner dimension, in chunks of about _CHUNK products:
    # each chunk folds the running total into its first term, then accumulates sequentially
    inner = a.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    if inner == 0:
        return np.zeros(shape, dtype=np.float64)
    step = max(1, _CHUNK // max(1, math.prod(shape)))
    out: Array | None = None
    for start in range(0, inner, step):
        stop = min(start + step, inner)
        products = a[..., :, start:stop, None] * b[..., None, start:stop, :]
        if out is not None:
            products[..., :, 0, :] += out
        out = np.add.accumulate(products, axis=-2)[..., -1, :]
    assert out is not None
    return np.ascontiguousarray(out)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Array, b: Array, *, tape: AdjointTape | None = None) -> Array:
    """
    Matrix product with a fixed summation order.

    Leading dimensions broadcast like `numpy.matmul`. Each output entry is accumulated
    left-to-right over the inner dimension, so results equal a naive triple loop bit-for-bit.

    Raises:
        ShapeError: If the inner dimensions differ or an operand is not at least 2-D.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = _ordered_matmul(a, b)
    if tape is not None:

        def vjp(g: Array) -> tuple[Array | None, ...]:
            ga = _unbroadcast(_ordered_matmul(g, np.swapaxes(b, -1, -2)), a.shape)
            gb = _unbroadcast(_ordered_matmul(np.swapaxes(a, -1, -2), g), b.shape)
            return ga, gb

        tape.record("matmul", (a, b), out, _ordered_matmul, vjp)
    return out


def add(a: Array, b: Array, *, tape: AdjointTape | None = None) -> Array:
    out = np.add(a, b)
    if tape is not None:
        tape.record(
            "add",
            (a, b),
            out,
            np.add,
            lambda g: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))),
        )
    return out


def scale(x: Array, factor: float, *, tape: AdjointTape | None = None) -> Array:
    out = x * factor
    if tape is not None:
        tape.record("scale", (x,), out, lambda v: v * factor, lambda g: (g * factor,))
    return out


def multiply(a: Array, b: Array, *, tape: AdjointTape | None = None) -> Array:
    """Elementwise product with broadcasting."""
    out = np.multiply(a, b)
    if tape is not None:
        tape.record(
            "multiply",
            (a, b),
            out,
            np.multiply,
            lambda g: (_unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))),
        )
    return out


def causal_fill(scores: Array, allowed: NDArray[np.bool_], *, tape: AdjointTape | None = None) -> Array:
    """Replace disallowed cells with -inf; allowed cells pass through unchanged."""

    def forward(values: Array) -> Array:
        return np.where(allowed, values, -np.inf)

    out = forward(scores)
    if tape is not None:
        tape.record("causal_fill", (scores,), out, forward, lambda g: (np.where(allowed, g, 0.0),))
    return out


def _softmax(x: Array) -> Array:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def softmax_rows(x: Array, *, tape: AdjointTape | None = None) -> Array:
    """
    Row-wise softmax over the last axis.

    Each row is shifted by its maximum before exponentiation, so large but equal entries do not
    overflow. Entries of -inf receive probability zero.
    """
    out = _softmax(x)
    if tape is not None:

        def vjp(g: Array) -> tuple[Array | None, ...]:
            inner = np.sum(g * out, axis=-1, keepdims=True)
            return (out * (g - inner),)

        tape.record("softmax_rows", (x,), out, _softmax, vjp)
    return out


def _gelu(x: Array) -> Array:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_K * x**3)))


def gelu(x: Array, *, tape: AdjointTape | None = None) -> Array:
    """Tanh-form GELU."""
    out = _gelu(x)
    if tape is not None:

        def vjp(g: Array) -> tuple[Array | None, ...]:
            t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
            slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
            return (g * slope,)

        tape.record("gelu", (x,), out, _gelu, vjp)
    return out


def _normalize(x: Array) -> tuple[Array, Array]:
    centered = x - np.mean(x, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered**2, axis=-1, keepdims=True) + LAYER_NORM_EPS)
    return centered * inv_std, inv_std


def layer_norm(x: Array, gain: Array, bias: Array, *, tape: AdjointTape | None = None) -> Array:
    """
    Row-wise layer norm with affine parameters.

    A zero row normalizes to zero. Only `x` is differentiated; gain and bias are constants.
    """

    def forward(values: Array) -> Array:
        return _normalize(values)[0] * gain + bias

    normed, inv_std = _normalize(x)
    out = normed * gain + bias
    if tape is not None:

        def vjp(g: Array) -> tuple[Array | None, ...]:
            g_hat = g * gain
            mean_g = np.mean(g_hat, axis=-1, keepdims=True)
            mean_gx = np.mean(g_hat * normed, axis=-1, keepdims=True)
            return (inv_std * (g_hat - mean_g - normed * mean_gx),)

        tape.record("layer_norm", (x,), out, forward, vjp)
    return out


def transpose(x: Array, axes: tuple[int, ...], *, tape: AdjointTape | None = None) -> Array:
    out = np.transpose(x, axes).copy()
    if tape is not None:
        inverse = tuple(int(i) for i in np.argsort(axes))
        tape.record(
            "transpose",
            (x,),
            out,
            lambda v: np.transpose(v, axes).copy(),
            lambda g: (np.transpose(g, inverse),),
        )
    return out


def reshape(x: Array, shape: tuple[int, ...], *, tape: AdjointTape | None = None) -> Array:
    out = np.reshape(x, shape).copy()
    if tape is not None:
        original = x.shape
        tape.record("reshape", (x,), out, lambda v: np.reshape(v, shape).copy(), lambda g: (np.reshape(g, original),))
    return out


def take_row(x: Array, index: int, *, tape: AdjointTape | None = None) -> Array:
    """Row `index` of the second-to-last axis."""
    out = x[..., index, :].copy()
    if tape is not None:

        def vjp(g: Array) -> tuple[Array | None, ...]:
            full = np.zeros_like(x)
            full[..., index, :] = g
            return (full,)

        tape.record("take_row", (x,), out, lambda v: v[..., index, :].copy(), vjp)
    return out


def replace_row(x: Array, index: int, row: Array, *, tape: AdjointTape | None = None) -> Array:
    """Copy of `x` with row `index` of the second-to-last axis replaced by `row`."""

    def forward(values: Array, new_row: Array) -> Array:
        result = values.copy()
        result[..., index, :] = new_row
        return result

    out = forward(x, row)
    if tape is not None:

        def vjp(g: Array) -> tuple[Array | None, ...]:
            g_x = g.copy()
            g_x[..., index, :] = 0.0
            return g_x, _unbroadcast(g[..., index, :].copy(), np.shape(row))

        tape.record("replace_row", (x, row), out, forward, vjp)
    return out


def dot(u: Array, v: Array, *, tape: AdjointTape | None = None) -> Array:
    """Inner product of two vectors as a 0-d array."""
    if u.shape != v.shape:
        raise ShapeError("dot", u.shape, v.shape)

    def forward(a: Array, b: Array) -> Array:
        return np.asarray(np.sum(a * b), dtype=np.float64)

    out = forward(u, v)
    if tape is not None:
        tape.record("dot", (u, v), out, forward, lambda g: (g * v, g * u))
    return out


def _norm(x: Array) -> float:
    return float(np.sqrt(np.sum(x * x)))


def cosine_sim(u: Array, v: Array, *, tape: AdjointTape | None = None) -> Array:
    """
    Cosine similarity u·v / (|u||v|) as a 0-d array, clipped to [-1, 1].

    Raises:
        ShapeError: If the vectors differ in shape.
        DegenerateVectorError: If either vector has zero norm.
    """
    if u.shape != v.shape:
        raise ShapeError("cosine_sim", u.shape, v.shape)
    norm_u, norm_v = _norm(u), _norm(v)
    if norm_u == 0.0 or norm_v == 0.0:
        raise DegenerateVectorError("cosine similarity is undefined for a zero-norm vector")

    def forward(a: Array, b: Array) -> Array:
        value = np.sum(a * b) / (_norm(a) * _norm(b))
        return np.asarray(np.clip(value, -1.0, 1.0), dtype=np.float64)

    out = forward(u, v)
    if tape is not None:
        cos = float(np.sum(u * v) / (norm_u * norm_v))

        def vjp(g: Array) -> tuple[Array | None, ...]:
            g_u = g * (v / (norm_u * norm_v) - cos * u / norm_u**2)
            g_v = g * (u / (norm_u * norm_v) - cos * v / norm_v**2)
            return g_u, g_v

        tape.record("cosine_sim", (u, v), out, forward, vjp)
    return out


def entropy(probs: Array) -> float:
    """Shannon entropy in nats; zero-probability entries contribute nothing."""
    mask = probs > 0.0
    return float(-np.sum(probs[mask] * np.log(probs[mask])))


