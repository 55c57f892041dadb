"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .gradcheck import GradCheckReport, LeafReport, grad_check, relative_error
from .ops import (
    OP_KINDS,
    add,
    avg_pool2d,
    broadcast_scale,
    clamp,
    conv2d,
    dense,
    forward_op,
    leaky_relu,
    matmul,
    mean,
    mul,
    nearest_upsample2d,
    permute,
    relu,
    reshape,
    round_ste,
    sigmoid,
    softplus,
    square,
    sub,
    sum,
    transpose_conv2d,
)
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward, debug_enabled, set_debug

__all__ = [
    "Tensor", "Tape", "backward", "as_tensor", "ShapeError", "NonFiniteError", "set_debug",
    "debug_enabled", "grad_check", "GradCheckReport", "LeafReport", "relative_error", "OP_KINDS",
    "forward_op", "add", "sub", "mul", "matmul", "dense", "conv2d", "transpose_conv2d", "relu",
    "leaky_relu", "sigmoid", "softplus", "square", "mean", "sum", "reshape", "permute",
    "broadcast_scale", "avg_pool2d", "nearest_upsample2d", "clamp", "round_ste",
]
