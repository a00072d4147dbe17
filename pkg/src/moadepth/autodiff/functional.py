"""Differentiable primitives.

Every public function here wraps a :class:`Function` subclass; ``PRIMITIVES`` maps the
primitive names to them for table-driven use (gradient suites, the CLI).
"""
from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from ..exceptions import DimensionError, ParameterError
from .tensor import Function, Tensor, as_tensor, unbroadcast

Axis = Optional[Union[int, Tuple[int, ...]]]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _broadcast_shape(op: str, *shapes: Tuple[int, ...]) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {', '.join(map(str, shapes))}") from None


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, _normalize_axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------- elementwise binary


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape("sub", a.shape, b.shape)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape("mul", a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape("div", a.shape, b.shape)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim == 0 or b.ndim == 0:
            raise DimensionError(f"matmul: scalar operands not allowed, got {a.shape} @ {b.shape}")
        ka = a.shape[-1]
        kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
        if ka != kb:
            raise DimensionError(f"matmul: inner dimensions differ, got {a.shape} @ {b.shape}")
        if a.ndim > 2 and b.ndim > 2:
            _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        if a.ndim == 1:
            g = np.expand_dims(g, -2)
        if b.ndim == 1:
            g = np.expand_dims(g, -1)
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape).reshape(a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape).reshape(b.shape)
        return ga, gb


# ---------------------------------------------------------------- elementwise unary


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, x):
        return np.log(x)

    def backward(self, g):
        return (g / self.inputs[0].data,)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x):
        self.cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        return x * self.cdf

    def backward(self, g):
        x = self.inputs[0].data
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (self.cdf + x * pdf),)


class Relu(Function):
    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, g):
        return (g * (self.inputs[0].data > 0),)


class Sigmoid(Function):
    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Abs(Function):
    def forward(self, x):
        return np.abs(x)

    def backward(self, g):
        return (g * np.sign(self.inputs[0].data),)


class Square(Function):
    def forward(self, x):
        return x * x

    def backward(self, g):
        return (2.0 * g * self.inputs[0].data,)


# ---------------------------------------------------------------- normalizations


class Softmax(Function):
    def forward(self, x, axis=-1, temperature=1.0):
        if not temperature > 0:
            raise ParameterError(f"softmax: temperature must be > 0, got {temperature}")
        self.axis, self.temperature = axis, temperature
        z = x / temperature
        z = np.exp(z - z.max(axis=axis, keepdims=True))
        self.out = z / z.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        inner = (g * y).sum(axis=self.axis, keepdims=True)
        return (y * (g - inner) / self.temperature,)


class LogSoftmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.prob = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.prob * g.sum(axis=self.axis, keepdims=True),)


class LayerNorm(Function):
    """Normalize over the last axis to zero mean and unit (population) variance."""

    def forward(self, x, eps=1e-10):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        self.inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        self.xhat = centered * self.inv_std
        return self.xhat

    def backward(self, g):
        xhat = self.xhat
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (self.inv_std * (g - gm - xhat * gx),)


# ---------------------------------------------------------------- reductions


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        return (_expand_reduced(g, x.shape, self.axis, self.keepdims).copy(),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        self.count = int(np.prod([x.shape[a] for a in _normalize_axes(axis, x.ndim)]))
        return np.mean(x, axis=axis, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        return (_expand_reduced(g / self.count, x.shape, self.axis, self.keepdims).copy(),)


class Var(Function):
    """Population variance."""

    def forward(self, x, axis=None, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        self.count = int(np.prod([x.shape[a] for a in _normalize_axes(axis, x.ndim)]))
        self.centered = x - x.mean(axis=axis, keepdims=True)
        return np.mean(self.centered * self.centered, axis=axis, keepdims=keepdims)

    def backward(self, g):
        x = self.inputs[0]
        g = _expand_reduced(g, x.shape, self.axis, self.keepdims)
        return (2.0 * g * self.centered / self.count,)


# ---------------------------------------------------------------- shape ops


class Concat(Function):
    def forward(self, *arrays, axis=0):
        ref = arrays[0]
        ax = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
                raise DimensionError(
                    f"concat: shapes {[x.shape for x in arrays]} differ off axis {axis}")
        self.axis = ax
        self.splits = np.cumsum([a.shape[ax] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=ax)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class BroadcastTo(Function):
    def forward(self, x, shape=()):
        try:
            return np.broadcast_to(x, shape).copy()
        except ValueError:
            raise DimensionError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def backward(self, g):
        return (unbroadcast(g, self.inputs[0].shape),)


class Reshape(Function):
    def forward(self, x, shape=()):
        try:
            return x.reshape(shape)
        except ValueError:
            raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, g):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class GetItem(Function):
    def forward(self, x, index=None):
        self.index = index
        return x[index]

    def backward(self, g):
        x = self.inputs[0]
        out = np.zeros(x.shape)
        if _is_basic_index(self.index):
            out[self.index] = g
        else:
            np.add.at(out, self.index, g)
        return (out,)


# ---------------------------------------------------------------- spatial ops


class AvgPool2d(Function):
    """Non-overlapping average pooling over the trailing two axes."""

    def forward(self, x, kernel=(2, 2)):
        kh, kw = kernel
        if x.ndim < 2 or x.shape[-2] % kh or x.shape[-1] % kw:
            raise DimensionError(f"avg_pool2d: spatial shape {x.shape[-2:]} not divisible by {kernel}")
        self.kernel = (kh, kw)
        h, w = x.shape[-2] // kh, x.shape[-1] // kw
        return x.reshape(x.shape[:-2] + (h, kh, w, kw)).mean(axis=(-3, -1))

    def backward(self, g):
        kh, kw = self.kernel
        up = np.repeat(np.repeat(g, kh, axis=-2), kw, axis=-1)
        return (up / (kh * kw),)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix, half-pixel centers, edges clamped."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


class UpsampleBilinear2d(Function):
    def forward(self, x, size=(1, 1)):
        if x.ndim < 2:
            raise DimensionError(f"upsample_bilinear2d: need at least 2 axes, got {x.shape}")
        out_h, out_w = size
        self.mh = bilinear_matrix(x.shape[-2], out_h)
        self.mw = bilinear_matrix(x.shape[-1], out_w)
        return self.mh @ x @ self.mw.T

    def backward(self, g):
        return (self.mh.T @ g @ self.mw,)


# ---------------------------------------------------------------- public wrappers


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def exp(x) -> Tensor:
    return Exp.apply(x)


def log(x) -> Tensor:
    return Log.apply(x)


def gelu(x) -> Tensor:
    return Gelu.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def abs(x) -> Tensor:  # noqa: A001
    return Abs.apply(x)


def square(x) -> Tensor:
    return Square.apply(x)


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    return Softmax.apply(x, axis=axis, temperature=temperature)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x, eps: float = 1e-10) -> Tensor:
    return LayerNorm.apply(x, eps=eps)


def sum(x, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def var(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return Var.apply(x, axis=axis, keepdims=keepdims)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def broadcast_to(x, shape: Iterable[int]) -> Tensor:
    return BroadcastTo.apply(x, shape=tuple(shape))


def reshape(x, shape: Iterable[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(x, axes=None if axes is None else tuple(axes))


def getitem(x, index) -> Tensor:
    return GetItem.apply(x, index=index)


def avg_pool2d(x, kernel: Union[int, Tuple[int, int]]) -> Tensor:
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    return AvgPool2d.apply(x, kernel=tuple(kernel))


def upsample_bilinear2d(x, size: Tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if size[0] < h or size[1] < w:
        raise DimensionError(f"upsample_bilinear2d: target {tuple(size)} smaller than input {(h, w)}")
    return UpsampleBilinear2d.apply(x, size=tuple(size))


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "exp": exp, "log": log, "gelu": gelu, "relu": relu, "sigmoid": sigmoid,
    "softmax": softmax, "log_softmax": log_softmax, "layer_norm": layer_norm,
    "sum": sum, "mean": mean, "var": var, "concat": concat, "broadcast": broadcast_to,
    "avg_pool2d": avg_pool2d, "upsample_bilinear2d": upsample_bilinear2d,
    "abs": abs, "square": square, "reshape": reshape, "transpose": transpose,
    "getitem": getitem,
}

_VARIADIC = {"concat"}


def primitive_forward(op_name: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Run a primitive by name, e.g. ``primitive_forward("softmax", [x], {"temperature": 2.0})``."""
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise ParameterError(f"unknown primitive {op_name!r}") from None
    attrs = attrs or {}
    if op_name in _VARIADIC:
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
