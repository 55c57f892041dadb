"""Differentiable operations.

Every public function here records a node when any input requires grad.
Convolution kernels use the (out_ch, in_ch, k, k) layout; a kernel with an
extra leading batch axis (B, out_ch, in_ch, k, k) convolves sample b with
kernel b, which is how per-sample modulated weights are evaluated.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "matmul", "conv2d", "transpose_conv2d", "relu",
    "leaky_relu", "sigmoid", "softplus", "square", "mean", "sum", "reshape",
    "permute", "broadcast_scale", "avg_pool2d", "nearest_upsample2d", "clamp",
    "round_ste", "dense", "forward_op", "OP_KINDS",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    dtype = (ta or tb).dtype if (ta or tb) is not None else np.float32
    if ta is None:
        a = Tensor(np.asarray(a, dtype=dtype))
    if tb is None:
        b = Tensor(np.asarray(b, dtype=dtype))
    return a, b


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kind, f"cannot broadcast {a.shape} with {b.shape}") from None


class _Add(Function):
    kind = "add"

    def forward(self, a, b):
        _broadcast_shape(self.kind, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class _Sub(Function):
    kind = "sub"

    def forward(self, a, b):
        _broadcast_shape(self.kind, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class _Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        _broadcast_shape(self.kind, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.inputs[0].requires_grad else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.inputs[1].requires_grad else None
        return ga, gb


def add(a, b) -> Tensor:
    return _Add.apply(*_binary_operands(a, b))


def sub(a, b) -> Tensor:
    return _Sub.apply(*_binary_operands(a, b))


def mul(a, b) -> Tensor:
    return _Mul.apply(*_binary_operands(a, b))


class _MatMul(Function):
    """numpy ``matmul`` semantics, including broadcast batch axes."""

    kind = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(self.kind, f"operands need >= 2 dims, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.kind, f"inner dimensions differ: {a.shape} @ {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(self.kind, f"batch dimensions {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = gb = None
        if self.inputs[0].requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(self.b, -1, -2)), self.a.shape)
        if self.inputs[1].requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(self.a, -1, -2), g), self.b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    return _MatMul.apply(*_binary_operands(a, b))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in).

    A weight with a leading batch axis (B, out, in) applies weight b to row b
    of a (B, in) input.
    """
    if weight.ndim == 3:
        y = reshape(matmul(reshape(x, (x.shape[0], 1, x.shape[1])), permute(weight, (0, 2, 1))),
                    (x.shape[0], weight.shape[1]))
    else:
        y = matmul(x, permute(weight, (1, 0)))
    if bias is not None:
        y = add(y, bias)
    return y


# ---------------------------------------------------------------- convolution

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """(B, C, H, W) -> (B, C*k*k, Ho*Wo) patch matrix plus output size."""
    xp = _pad(x, padding)
    b, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the image."""
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(b, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += patches[:, :, i, j]
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def _check_conv(kind: str, x: np.ndarray, w: np.ndarray, in_axis: int) -> None:
    if x.ndim != 4:
        raise ShapeError(kind, f"input must be (B, C, H, W), got {x.shape}")
    if w.ndim not in (4, 5):
        raise ShapeError(kind, f"kernel must be (out, in, k, k) or (B, out, in, k, k), got {w.shape}")
    if w.shape[-1] != w.shape[-2]:
        raise ShapeError(kind, f"kernel must be square, got {w.shape[-2:]}")
    if w.ndim == 5 and w.shape[0] != x.shape[0]:
        raise ShapeError(kind, f"per-sample kernel batch {w.shape[0]} != input batch {x.shape[0]}")
    if w.shape[in_axis] != x.shape[1]:
        raise ShapeError(kind, f"input channels {x.shape[1]} != kernel channels {w.shape[in_axis]}")


class _Conv2d(Function):
    kind = "conv2d"

    def forward(self, x, w):
        _check_conv(self.kind, x, w, -3)
        s, p = self.params["stride"], self.params["padding"]
        k = w.shape[-1]
        if x.shape[2] + 2 * p < k or x.shape[3] + 2 * p < k:
            raise ShapeError(self.kind, f"kernel {k} larger than padded input {x.shape[2:]}")
        cols, ho, wo = _im2col(x, k, s, p)
        self.cols, self.ho, self.wo, self.x_shape, self.w = cols, ho, wo, x.shape, w
        o = w.shape[-4]
        wm = w.reshape(w.shape[:-3] + (-1,))
        out = np.matmul(wm, cols)
        return out.reshape(x.shape[0], o, ho, wo)

    def backward(self, g):
        w, cols = self.w, self.cols
        b = self.x_shape[0]
        o = w.shape[-4]
        g2 = g.reshape(b, o, -1)
        wm = w.reshape(w.shape[:-3] + (-1,))
        gx = gw = None
        if self.inputs[1].requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1))
            if w.ndim == 4:
                gw = gw.sum(axis=0)
            gw = gw.reshape(w.shape)
        if self.inputs[0].requires_grad:
            dcols = np.matmul(np.swapaxes(wm, -1, -2), g2)
            gx = _col2im(dcols, self.x_shape, w.shape[-1], self.params["stride"], self.params["padding"],
                         self.ho, self.wo)
        return gx, gw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    y = _Conv2d.apply(x, weight, stride=int(stride), padding=int(padding))
    if bias is not None:
        bshape = (1, -1, 1, 1) if bias.ndim == 1 else (bias.shape[0], -1, 1, 1)
        y = add(y, reshape(bias, bshape))
    return y


class _TransposeConv2d(Function):
    """Adjoint of conv2d.  Kernel layout is (in_ch, out_ch, k, k): the same
    array that, used in conv2d, would map out_ch channels to in_ch."""

    kind = "transpose_conv2d"

    def forward(self, x, w):
        if w.ndim != 4:
            raise ShapeError(self.kind, f"kernel must be (in, out, k, k), got {w.shape}")
        _check_conv(self.kind, x, w, 0)
        s, p = self.params["stride"], self.params["padding"]
        k = w.shape[-1]
        b, _, h, wd = x.shape
        ho = (h - 1) * s - 2 * p + k
        wo = (wd - 1) * s - 2 * p + k
        if ho <= 0 or wo <= 0:
            raise ShapeError(self.kind, f"output size ({ho}, {wo}) not positive")
        self.x, self.w, self.out_shape = x, w, (b, w.shape[1], ho, wo)
        wm = w.reshape(w.shape[0], -1)
        dcols = np.matmul(wm.T, x.reshape(b, w.shape[0], h * wd))
        return _col2im(dcols, self.out_shape, k, s, p, h, wd)

    def backward(self, g):
        s, p = self.params["stride"], self.params["padding"]
        x, w = self.x, self.w
        k = w.shape[-1]
        cols, ho, wo = _im2col(g, k, s, p)
        b = x.shape[0]
        wm = w.reshape(w.shape[0], -1)
        gx = gw = None
        if self.inputs[0].requires_grad:
            gx = np.matmul(wm, cols).reshape(x.shape)
        if self.inputs[1].requires_grad:
            x2 = x.reshape(b, w.shape[0], -1)
            gw = np.matmul(x2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        return gx, gw


def transpose_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return _TransposeConv2d.apply(x, weight, stride=int(stride), padding=int(padding))


# ---------------------------------------------------------------- pointwise

class _Relu(Function):
    kind = "relu"

    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, g):
        return (g * self.mask,)

    def near_kink(self, step):
        return bool((np.abs(self.inputs[0].data) <= step).any())


class _LeakyRelu(Function):
    kind = "leaky_relu"

    def forward(self, x):
        slope = self.params["slope"]
        self.scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
        return x * self.scale

    def backward(self, g):
        return (g * self.scale,)

    def near_kink(self, step):
        return bool((np.abs(self.inputs[0].data) <= step).any())


class _Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, x):
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1 - self.out),)


class _Softplus(Function):
    kind = "softplus"

    def forward(self, x):
        self.x = x
        return np.logaddexp(np.zeros((), dtype=x.dtype), x)

    def backward(self, g):
        x = self.x
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
        return (g * sig,)


class _Square(Function):
    kind = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, g):
        return (2 * g * self.x,)


class _Clamp(Function):
    """Clamp to [lo, hi] with a straight-through (identity) backward."""

    kind = "clamp"

    def forward(self, x):
        return np.clip(x, self.params["lo"], self.params["hi"])

    def backward(self, g):
        return (g,)

    def near_kink(self, step):
        x = self.inputs[0].data
        return bool(((x <= self.params["lo"] + step) | (x >= self.params["hi"] - step)).any())


class _RoundSTE(Function):
    kind = "round_ste"

    def forward(self, x):
        return np.round(x)

    def backward(self, g):
        return (g,)

    def near_kink(self, step):
        return True


def relu(x: Tensor) -> Tensor:
    return _Relu.apply(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return _LeakyRelu.apply(x, slope=float(slope))


def sigmoid(x: Tensor) -> Tensor:
    return _Sigmoid.apply(x)


def softplus(x: Tensor) -> Tensor:
    return _Softplus.apply(x)


def square(x: Tensor) -> Tensor:
    return _Square.apply(x)


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    return _Clamp.apply(x, lo=float(lo), hi=float(hi))


def round_ste(x: Tensor) -> Tensor:
    """Round to nearest integer; gradient passes straight through."""
    return _RoundSTE.apply(x)


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class _Sum(Function):
    kind = "sum"

    def forward(self, x):
        self.axes = _norm_axis(self.params["axis"], x.ndim)
        self.shape = x.shape
        return np.asarray(x.sum(axis=self.axes, keepdims=self.params["keepdims"]))

    def backward(self, g):
        if not self.params["keepdims"]:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.shape).copy(),)


class _Mean(Function):
    kind = "mean"

    def forward(self, x):
        self.axes = _norm_axis(self.params["axis"], x.ndim)
        self.shape = x.shape
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return np.asarray(x.mean(axis=self.axes, keepdims=self.params["keepdims"]), dtype=x.dtype)

    def backward(self, g):
        if not self.params["keepdims"]:
            g = np.expand_dims(g, self.axes)
        return ((np.broadcast_to(g, self.shape) / self.count).astype(g.dtype),)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return _Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _Mean.apply(x, axis=axis, keepdims=keepdims)


class _Reshape(Function):
    kind = "reshape"

    def forward(self, x):
        self.shape = x.shape
        try:
            return x.reshape(self.params["shape"])
        except ValueError:
            raise ShapeError(self.kind, f"cannot reshape {x.shape} into {self.params['shape']}") from None

    def backward(self, g):
        return (g.reshape(self.shape),)


class _Permute(Function):
    kind = "permute"

    def forward(self, x):
        axes = self.params["axes"]
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(self.kind, f"axes {axes} invalid for {x.ndim}-d input")
        self.inv = np.argsort(axes)
        return x.transpose(axes)

    def backward(self, g):
        return (g.transpose(self.inv),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _Reshape.apply(x, shape=tuple(shape))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    return _Permute.apply(x, axes=tuple(axes))


class _BroadcastScale(Function):
    """Scale x along one axis by a vector.

    ``scale`` has shape (n,) with n == x.shape[axis], or (B, n) which yields
    a stacked (B, *x.shape) result: one scaled copy per row of ``scale``.
    """

    kind = "broadcast_scale"

    def forward(self, x, s):
        axis = self.params["axis"] % x.ndim
        n = x.shape[axis]
        if s.ndim not in (1, 2) or s.shape[-1] != n:
            raise ShapeError(self.kind, f"scale shape {s.shape} does not match axis {axis} of size {n}")
        shape = [1] * x.ndim
        shape[axis] = n
        if s.ndim == 1:
            self.sv = s.reshape(shape)
        else:
            self.sv = s.reshape([s.shape[0]] + shape)
        self.x, self.axis, self.batched = x, axis, s.ndim == 2
        return x * self.sv

    def backward(self, g):
        gx = gs = None
        if self.inputs[0].requires_grad:
            gx = g * self.sv
            if self.batched:
                gx = gx.sum(axis=0)
        if self.inputs[1].requires_grad:
            prod = g * self.x
            lead = 1 if self.batched else 0
            red = tuple(i + lead for i in range(self.x.ndim) if i != self.axis)
            gs = prod.sum(axis=red)
        return gx, gs


def broadcast_scale(x: Tensor, scale: Tensor, axis: int = 0) -> Tensor:
    return _BroadcastScale.apply(x, scale, axis=int(axis))


class _AvgPool2d(Function):
    kind = "avg_pool2d"

    def forward(self, x):
        k = self.params["k"]
        b, c, h, w = x.shape
        if h % k or w % k:
            raise ShapeError(self.kind, f"spatial size {(h, w)} not divisible by {k}")
        self.shape = x.shape
        return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, g):
        k = self.params["k"]
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (g.astype(self.inputs[0].dtype),)


class _NearestUpsample2d(Function):
    kind = "nearest_upsample2d"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(self.kind, f"input must be (B, C, H, W), got {x.shape}")
        f = self.params["factor"]
        return np.repeat(np.repeat(x, f, axis=2), f, axis=3)

    def backward(self, g):
        f = self.params["factor"]
        b, c, h, w = g.shape
        return (g.reshape(b, c, h // f, f, w // f, f).sum(axis=(3, 5)),)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", f"input must be (B, C, H, W), got {x.shape}")
    return _AvgPool2d.apply(x, k=int(k))


def nearest_upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    return _NearestUpsample2d.apply(x, factor=int(factor))


# ---------------------------------------------------------------- dispatch

OP_KINDS = (
    "add", "sub", "mul", "matmul", "conv2d", "transpose_conv2d", "relu", "leaky_relu", "sigmoid",
    "mean", "sum", "reshape", "broadcast_scale", "avg_pool2d", "nearest_upsample2d", "clamp",
)


def forward_op(kind: str, inputs: Sequence, **params) -> Tensor:
    """Run one op by name; the uniform entry point used by tooling and tests."""
    table = {
        "add": add, "sub": sub, "mul": mul, "matmul": matmul, "conv2d": conv2d,
        "transpose_conv2d": transpose_conv2d, "relu": relu, "leaky_relu": leaky_relu,
        "sigmoid": sigmoid, "mean": mean, "sum": sum, "reshape": reshape,
        "broadcast_scale": broadcast_scale, "avg_pool2d": avg_pool2d,
        "nearest_upsample2d": nearest_upsample2d, "clamp": clamp, "softplus": softplus,
        "square": square, "permute": permute, "round_ste": round_ste,
    }
    if kind not in table:
        raise ValueError(f"unknown op kind {kind!r}")
    return table[kind](*[as_tensor(t) for t in inputs], **params)
