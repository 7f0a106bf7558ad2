"""Differentiable operations on :class:`Tensor`.

Only the operations the models in this package need. Binary elementwise ops
broadcast like numpy; gradients are summed back to each input's shape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast("div", a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_result(a.data / b.data, (a, b), backward, "div")


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return make_result(out, (x,), backward, "gelu")


def relu_or_gelu(x: Tensor, kind: str = "gelu") -> Tensor:
    return gelu(x) if kind == "gelu" else relu(x)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, dtype=x.dtype)


# -- reductions and shape ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,),
                       lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select entries along axis 0 (batch indexing)."""
    rows = np.asarray(rows)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return (full,)

    return make_result(x.data[rows], (x,), backward, "take_rows")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and g.ndim > 2:
            # fold batch dims into one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -- normalisation and probabilities ----------------------------------------

def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    if gamma is not None and gamma.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: scale {gamma.shape} vs features {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        g = np.asarray(g)
        gx = inv * (g - g.mean(axis=-1, keepdims=True)
                    - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = make_result(xhat.astype(x.dtype), (x,), backward, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def _check_finite(op, data):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is True get exactly zero weight."""
    _check_finite("softmax", x.data)
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """``x[..., index]``: one entry of the last axis per leading position."""
    index = np.asarray(index)
    if index.shape != x.shape[:-1]:
        raise DimensionError(f"pick: index shape {index.shape} vs {x.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise IndexError(f"pick: index out of range [0, {x.shape[-1]})")
    idx = index[..., None]
    out = np.take_along_axis(x.data, idx, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return make_result(out, (x,), backward, "pick")


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Sum over positions of -log softmax(logits)[target].

    Fused so the gradient w.r.t. logits is exactly ``softmax - onehot``.
    """
    target = np.asarray(target)
    m = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: target {target.shape} vs logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= m):
        raise IndexError(f"cross_entropy: target outside [0, {m})")
    _check_finite("cross_entropy", logits.data)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = np.take_along_axis(z, target[..., None], axis=-1)[..., 0] - np.log(s[..., 0])

    def backward(g):
        p = e / s
        np.put_along_axis(p, target[..., None],
                          np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g,)

    return make_result(np.asarray(-logp.sum(), dtype=logits.dtype), (logits,), backward, "cross_entropy")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise NumericError("l2_normalize: zero-norm vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return make_result(out, (x,), backward, "l2_normalize")


# -- lookup and spatial -----------------------------------------------------

def embedding_lookup(table: Tensor, index) -> Tensor:
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index outside [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return make_result(table.data[index], (table,), backward, "embedding_lookup")


def space_to_depth(x: Tensor, block: int = 2) -> Tensor:
    """(B, H, W, C) -> (B, H/b, W/b, b*b*C), grouping each b x b block."""
    b_, h, w, c = x.shape
    if h % block or w % block:
        raise DimensionError(f"space_to_depth: {h}x{w} not divisible by {block}")
    y = reshape(x, (b_, h // block, block, w // block, block, c))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b_, h // block, w // block, block * block * c))


def depth_to_space(x: Tensor, block: int = 2) -> Tensor:
    b_, h, w, c = x.shape
    if c % (block * block):
        raise DimensionError(f"depth_to_space: {c} channels not divisible by {block * block}")
    oc = c // (block * block)
    y = reshape(x, (b_, h, w, block, block, oc))
    y = transpose(y, (0, 1, 3, 2, 4, 5))
    return reshape(y, (b_, h * block, w * block, oc))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution, NHWC input, weight (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = weight.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input {x.shape} vs weight {weight.shape}")
    b_, h, w, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((b_, h, w, kh, kw, cin), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
    cols2 = cols.reshape(-1, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ wmat).reshape(b_, h, w, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(b_, h, w, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, i, j, :]
        return gxp[:, ph:ph + h, pw:pw + w, :], gw

    y = make_result(out, (x, weight), backward, "conv2d")
    return add(y, bias) if bias is not None else y
