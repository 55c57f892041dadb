"""Named parameter collections and the layer table shared by every network."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv", "upsample", "attention", "dense"
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "none"  # "none", "leaky_relu", "relu", "clamp"
    modulatable: bool = False

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv", "attention", "dense")

    def weight_shape(self) -> tuple:
        if self.kind == "conv":
            return (self.out_ch, self.in_ch, self.kernel, self.kernel)
        if self.kind in ("attention", "dense"):
            return (self.out_ch, self.in_ch)
        return ()


@dataclass
class Network:
    """An ordered layer table plus its parameters, keyed ``<layer>.weight``/``<layer>.bias``."""

    kind: str
    layers: list
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple]:
        return iter(self.params.items())

    def modulatable_layers(self) -> list:
        return [s for s in self.layers if s.modulatable]

    def requires_grad_(self, flag: bool) -> "Network":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def copy(self) -> "Network":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return Network(self.kind, list(self.layers), params, dict(self.meta))

    def state(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"{self.kind}: unexpected parameter {k}")
            if v.shape != self.params[k].shape:
                raise ValueError(f"{self.kind}: {k} has shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=np.float32).copy()


def init_params(layers: list, rng: Optional[np.random.Generator], gain: float = np.sqrt(2.0)) -> dict:
    """He-normal weights, zero biases; ``rng=None`` gives all-zero weights."""
    params = {}
    for spec in layers:
        if not spec.has_weights:
            continue
        shape = spec.weight_shape()
        fan_in = int(np.prod(shape[1:]))
        if rng is None:
            w = np.zeros(shape, dtype=np.float32)
        else:
            w = (rng.standard_normal(shape) * gain / np.sqrt(fan_in)).astype(np.float32)
        params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True, name=f"{spec.name}.weight")
        params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.out_ch, dtype=np.float32), requires_grad=True,
                                             name=f"{spec.name}.bias")
    return params


def activate(x: Tensor, activation: str) -> Tensor:
    if activation == "none":
        return x
    if activation == "leaky_relu":
        return ad.leaky_relu(x, 0.2)
    if activation == "relu":
        return ad.relu(x)
    if activation == "clamp":
        return ad.clamp(x, 0.0, 1.0)
    raise ValueError(f"unknown activation {activation!r}")


def run_layers(net: Network, x: Tensor, weights: Optional[dict] = None, collect: bool = False):
    """Evaluate ``net`` layer by layer.

    ``weights`` may override a layer's weight tensor (used for modulated
    weights); a 5-d conv weight or 3-d attention weight is per-sample.
    With ``collect`` the post-activation output of every conv layer is
    returned as well.
    """
    feats = []
    h = x
    for spec in net.layers:
        w = None
        if spec.has_weights:
            w = (weights or {}).get(spec.name, net.params[f"{spec.name}.weight"])
            b = net.params[f"{spec.name}.bias"]
        if spec.kind == "conv":
            h = ad.conv2d(h, w, b, stride=spec.stride, padding=spec.padding)
        elif spec.kind == "upsample":
            h = ad.nearest_upsample2d(h, spec.stride)
        elif spec.kind == "attention":
            pooled = ad.mean(h, axis=(2, 3))
            gate = ad.sigmoid(ad.dense(pooled, w, b))
            h = ad.mul(h, ad.reshape(gate, (h.shape[0], h.shape[1], 1, 1)))
        elif spec.kind == "dense":
            if h.ndim > 2:
                h = ad.mean(h, axis=tuple(range(2, h.ndim)))
            h = ad.dense(h, w, b)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        h = activate(h, spec.activation)
        if collect and spec.kind == "conv":
            feats.append(h)
    return (h, feats) if collect else h


def with_flags(layers: list, names: set) -> list:
    return [replace(s, modulatable=s.name in names) for s in layers]
