"""Central finite-difference checking of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class LeafReport:
    name: str
    max_rel_error: float
    status: str  # "ok", "fail" or "nondifferentiable point"


@dataclass
class GradCheckReport:
    leaves: dict = field(default_factory=dict)
    tol: float = 1e-3
    step: float = 1e-3

    @property
    def max_rel_error(self) -> float:
        errs = [r.max_rel_error for r in self.leaves.values()]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return all(r.status != "fail" for r in self.leaves.values())

    def failures(self) -> list:
        return [r for r in self.leaves.values() if r.status == "fail"]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); zero when both vanish."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
    diff = float(np.abs(analytic - numeric).max(initial=0.0))
    if scale < 1e-12:
        return diff
    return diff / scale


def grad_check(f: Callable[..., Tensor], point: Mapping[str, np.ndarray], step: float = 1e-3,
               tol: float = 1e-3) -> GradCheckReport:
    """Compare the backward pass of ``f`` with central differences.

    ``f`` receives one Tensor per entry of ``point`` (as keyword arguments) and
    must return a scalar Tensor.  Everything is recomputed in float64.  A leaf
    whose error exceeds ``tol`` while the graph passes within ``step`` of a
    kink (relu, clamp, rounding) is reported as a nondifferentiable point
    rather than a failure.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    # a power-of-two step keeps x +- h exact for moderate x
    step = float(2.0 ** np.round(np.log2(step)))
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
    out = f(**leaves)
    tape: Tape = backward(out, leaves.values())
    kinked = any(node.near_kink(step) for node in tape.nodes)

    def value(args: dict) -> float:
        ts = {k: Tensor(v) for k, v in args.items()}
        return float(np.asarray(f(**ts).data, dtype=np.float64).reshape(-1)[0])

    report = GradCheckReport(tol=tol, step=step)
    for name, x0 in base.items():
        numeric = np.zeros_like(x0)
        flat = numeric.reshape(-1)
        for idx in range(x0.size):
            args = dict(base)
            xp = x0.copy()
            xp.reshape(-1)[idx] += step
            args[name] = xp
            fp = value(args)
            xm = x0.copy()
            xm.reshape(-1)[idx] -= step
            args[name] = xm
            fm = value(args)
            # divide by the representable difference, not 2 * step
            flat[idx] = (fp - fm) / (xp.reshape(-1)[idx] - xm.reshape(-1)[idx])
        analytic = leaves[name].grad
        err = relative_error(analytic, numeric)
        if err <= tol:
            status = "ok"
        elif kinked:
            status = "nondifferentiable point"
        else:
            status = "fail"
        report.leaves[name] = LeafReport(name, err, status)
    return report


# ---------------------------------------------------------------- op suite

def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _cases(kind: str, rng: np.random.Generator) -> list:
    """Three (inputs, params) cases per op kind, kept clear of kinks."""
    n = rng.standard_normal
    if kind in ("add", "sub", "mul"):
        return [((n((3, 4)), n((3, 4))), {}), ((n((2, 3, 4)), n((4,))), {}), ((n((2, 1, 3)), n((1, 5, 3))), {})]
    if kind == "matmul":
        return [((n((3, 4)), n((4, 2))), {}), ((n((2, 3, 4)), n((4, 5))), {}), ((n((2, 2, 3)), n((2, 3, 2))), {})]
    if kind == "conv2d":
        return [((n((1, 2, 5, 5)), n((3, 2, 3, 3))), {"stride": 1, "padding": 1}),
                ((n((2, 3, 6, 6)), n((2, 3, 3, 3))), {"stride": 2, "padding": 1}),
                ((n((2, 2, 4, 4)), n((2, 3, 2, 2, 2))), {"stride": 1, "padding": 0})]
    if kind == "transpose_conv2d":
        return [((n((1, 2, 3, 3)), n((2, 3, 3, 3))), {"stride": 1, "padding": 1}),
                ((n((2, 3, 3, 3)), n((3, 2, 3, 3))), {"stride": 2, "padding": 1}),
                ((n((1, 2, 2, 2)), n((2, 2, 2, 2))), {"stride": 2, "padding": 0})]
    if kind in ("relu", "leaky_relu"):
        params = {"slope": 0.2} if kind == "leaky_relu" else {}
        return [((_away_from_zero(rng, s),), params) for s in ((5,), (3, 4), (2, 3, 4, 4))]
    if kind == "sigmoid":
        return [((n(s),), {}) for s in ((5,), (3, 4), (2, 3, 4))]
    if kind in ("mean", "sum"):
        return [((n((5,)),), {}), ((n((3, 4)),), {"axis": 1}), ((n((2, 3, 4, 4)),), {"axis": (2, 3)})]
    if kind == "reshape":
        return [((n((6,)),), {"shape": (2, 3)}), ((n((2, 3, 4)),), {"shape": (6, 4)}), ((n((4, 4)),), {"shape": (16,)})]
    if kind == "broadcast_scale":
        return [((n((2, 3)), n((2,))), {"axis": 0}), ((n((3, 2, 2, 2)), n((3,))), {"axis": 0}),
                ((n((4, 2, 3, 3)), n((2, 4))), {"axis": 0})]
    if kind == "avg_pool2d":
        return [((n((1, 1, 4, 4)),), {"k": 2}), ((n((2, 3, 6, 6)),), {"k": 3}), ((n((1, 2, 8, 8)),), {"k": 4})]
    if kind == "nearest_upsample2d":
        return [((n((1, 1, 2, 2)),), {"factor": 2}), ((n((2, 3, 3, 3)),), {"factor": 2}),
                ((n((1, 2, 2, 2)),), {"factor": 3})]
    if kind == "clamp":
        return [((rng.uniform(0.1, 0.9, s),), {"lo": 0.0, "hi": 1.0}) for s in ((5,), (3, 4), (2, 3, 4))]
    raise ValueError(f"no grad-check cases for {kind!r}")


def op_suite(seed: int = 0, step: float = 1e-3, tol: float = 1e-3, kinds=None) -> list:
    """Grad-check every forward_op kind on three seeded shapes.

    Returns a list of dicts (kind, case, max_rel_error, status).  Each case
    checks sum(op(inputs) * R) for a fixed random R so no gradient cancels.
    """
    from .ops import OP_KINDS, forward_op, mul, sum as tsum

    rng = np.random.default_rng(seed)
    rows = []
    for kind in kinds or OP_KINDS:
        for i, (inputs, params) in enumerate(_cases(kind, rng)):
            out_shape = forward_op(kind, [Tensor(x) for x in inputs], **params).shape
            weight = rng.standard_normal(out_shape)
            names = [f"x{j}" for j in range(len(inputs))]

            def f(_kind=kind, _params=params, _weight=weight, _names=names, **ts):
                return tsum(mul(forward_op(_kind, [ts[k] for k in _names], **_params), Tensor(_weight)))

            report = grad_check(f, dict(zip(names, inputs)), step=step, tol=tol)
            status = "ok" if report.passed and not any(
                r.status != "ok" for r in report.leaves.values()) else "fail"
            rows.append({"kind": kind, "case": i, "shapes": [list(np.shape(x)) for x in inputs],
                         "max_rel_error": report.max_rel_error, "status": status})
    return rows
