"""Differentiable ops.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` for inputs that
never need one). Binary elementwise ops follow numpy broadcasting and
reduce gradients back to the input shapes.
"""

import numpy as np
from scipy import special

from ..errors import ParameterError, ShapeError
from . import kernels
from .tensor import as_tensor, make_node

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ------------------------------------------------------------ elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward, "div")


def scale(x, c: float):
    """Multiply by a python scalar."""
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return make_node(x.data * c, (x,), backward, "scale")


def neg(x):
    return scale(x, -1.0)


def power(x, exponent: float):
    x = as_tensor(x)
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return make_node(x.data**p, (x,), backward, "power")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return make_node(out, (x,), backward, "exp")


def log(x):
    x = as_tensor(x)

    def backward(g):
        return (g / x.data,)

    return make_node(np.log(x.data), (x,), backward, "log")


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return make_node(out, (x,), backward, "sqrt")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return make_node(out, (x,), backward, "tanh")


def sigmoid(x):
    x = as_tensor(x)
    out = special.expit(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_node(out, (x,), backward, "sigmoid")


def silu(x):
    x = as_tensor(x)
    s = special.expit(x.data)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return make_node(x.data * s, (x,), backward, "silu")


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_node(x.data * cdf, (x,), backward, "gelu")


def squared_error(a, b):
    """Elementwise ``(a - b)**2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data

    def backward(g):
        return 2.0 * g * d, -2.0 * g * d

    return make_node(d * d, (a, b), backward, "squared_error")


def mse(a, b):
    return mean(squared_error(a, b))


# -------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_node(np.asarray(out), (x,), backward, "mean")


# ------------------------------------------------------------------ shapes


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return make_node(out, (x,), backward, "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_node(np.transpose(x.data, axes), (x,), backward, "transpose")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(x, index):
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_node(np.array(x.data[index]), (x,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# ------------------------------------------------------------------ linear


def matmul(a, b):
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped ``(in, out)``."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv2d(x, weight, bias=None):
    """2-D convolution, stride 1, "same" padding; kernel size 1 or 3.

    ``x``: ``(B, C, H, W)``; ``weight``: ``(O, C, k, k)``; ``bias``: ``(O,)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    cols = kernels.im2col3(x.data) if kh == 3 else x.data.reshape(b, c, h * w)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
        out += bias.data[None, :, None]
    out = out.reshape(b, o, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g = g.reshape(b, o, h * w)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g)
            gx = kernels.col2im3(dcols, x.shape) if kh == 3 else dcols.reshape(x.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return make_node(out, parents, backward, "conv2d")


def avg_pool2(x):
    """2x2 average pooling, stride 2."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extent, got {h}x{w}")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        g4 = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (g4 * 0.25,)

    return make_node(out, (x,), backward, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_node(out, (x,), backward, "upsample2")


# ----------------------------------------------------------- normalisation


def _rownorm(x, rows_shape, eps):
    """Normalise ``x`` viewed as ``rows_shape``; returns (xhat in x's shape, backward helper)."""
    rows = x.data.reshape(rows_shape)
    xhat_rows, inv_std = kernels.rownorm_forward(rows, eps)

    def back(dxhat):
        return kernels.rownorm_backward(np.ascontiguousarray(dxhat.reshape(rows_shape)), xhat_rows, inv_std).reshape(
            x.shape
        )

    return xhat_rows.reshape(x.shape), back


def group_norm(x, groups, gamma=None, beta=None, eps=1e-5):
    """Group normalisation over ``(C/groups, *spatial)`` per sample; x is ``(B, C, ...)``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"group_norm needs (B, C, ...) input, got {x.shape}")
    bsz, c = x.shape[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xhat, back = _rownorm(x, (bsz * groups, -1), eps)
    if gamma is None:

        def backward(g):
            return (back(g),)

        return make_node(xhat, (x,), backward, "group_norm")

    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine parameters must have shape ({c},)")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward_affine(g):
        gx = back(g * gamma.data.reshape(bshape)) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), backward_affine, "group_norm")


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Layer normalisation over the last axis."""
    x = as_tensor(x)
    d = x.shape[-1]
    xhat, back = _rownorm(x, (-1, d), eps)
    if gamma is None:

        def backward(g):
            return (back(g),)

        return make_node(xhat, (x,), backward, "layer_norm")

    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine parameters must have shape ({d},)")
    red = tuple(range(x.ndim - 1))
    out = xhat * gamma.data + beta.data

    def backward_affine(g):
        gx = back(g * gamma.data) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), backward_affine, "layer_norm")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward, "softmax")


def dropout(x, p, rng=None, train=True):
    """Inverted dropout: kept activations are divided by ``1 - p`` so eval is identity."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an explicit rng")
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep

    def backward(g):
        return (g * mask,)

    return make_node(x.data * mask, (x,), backward, "dropout")


OP_NAMES = (
    "add sub mul div scale neg power exp log sqrt tanh sigmoid silu gelu squared_error mse sum mean "
    "reshape transpose getitem concat matmul linear conv2d avg_pool2 upsample2 group_norm layer_norm "
    "softmax dropout"
).split()
