"""Tensor type and the reverse-mode machinery (tape, backward pass)."""

from __future__ import annotations

import os
from typing import Iterable, Optional, Sequence

import numpy as np

_DEBUG = os.environ.get("WMFP_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """Raised in debug mode on NaN/Inf inputs or on NaN/Inf produced from finite inputs."""


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """An n-d float array that can take part in automatic differentiation.

    ``data`` is float32 by default; float64 tensors are allowed and are what
    the gradient checker uses for its reference computation.  ``grad`` is
    filled by :func:`backward` and always matches ``data`` in shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Function] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, leaves: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, leaves)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the implementations live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return ops.mul(self, 1.0 / float(other))

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


class Function:
    """One recorded operation: holds its inputs and knows its local derivative.

    Subclasses implement ``forward`` on raw arrays (stashing whatever the
    backward rule needs on ``self``) and ``backward`` returning one gradient
    array (or None) per input.
    """

    kind = "function"

    def __init__(self, inputs: Sequence[Tensor], params: dict):
        self.inputs = tuple(inputs)
        self.params = params

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    def near_kink(self, step: float) -> bool:
        """True when a perturbation of ``step`` can cross a non-smooth point."""
        return False

    @classmethod
    def apply(cls, *inputs, **params) -> Tensor:
        tensors = [as_tensor(t) for t in inputs]
        fn = cls(tensors, params)
        out_data = fn.forward(*(t.data for t in tensors))
        if _DEBUG:
            _check_finite(cls.kind, tensors, out_data)
        out = Tensor(out_data)
        if any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.node = fn
        return out


def _check_finite(kind: str, inputs: Sequence[Tensor], out: np.ndarray) -> None:
    for i, t in enumerate(inputs):
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{kind}: input {i} contains NaN/Inf")
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind}: non-finite output from finite inputs")


class Tape:
    """Operations reachable from one output, in a valid evaluation order.

    Every node appears after the nodes producing its inputs; replaying the
    list in reverse visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.order: list[Tensor] = _topological(root)

    @property
    def nodes(self) -> list[Function]:
        return [t.node for t in self.order if t.node is not None]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t.node is None and t.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Tape:
    """Populate ``grad`` on every leaf that requires grad and feeds ``loss``.

    Gradients are overwritten, not accumulated across calls.  Leaves passed
    in ``leaves`` that do not reach ``loss`` get a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g
            continue
        in_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(t.node.kind, f"gradient shape {pg.shape} != input shape {parent.data.shape}")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if leaves is not None:
        reached = {id(x) for x in tape.order}
        for leaf in leaves:
            if id(leaf) not in reached:
                leaf.grad = np.zeros_like(leaf.data)
    return tape
