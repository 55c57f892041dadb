"""Fingerprints, the mapping network, per-layer affine maps and weight modulation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nets import LayerSpec, Network, init_params


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """A user's bit string.  ``bits[0]`` is the most significant bit in hex form."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size == 0:
            raise ValueError("fingerprint bits must be a non-empty 1-d array")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("fingerprint bits must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    @property
    def d_phi(self) -> int:
        return int(self.bits.size)

    def hex(self) -> str:
        width = (self.d_phi + 3) // 4
        value = int("".join(str(int(b)) for b in self.bits), 2)
        return format(value, f"0{width}x")

    @classmethod
    def from_hex(cls, text: str, d_phi: int) -> "Fingerprint":
        value = int(text, 16)
        if value >> d_phi:
            raise ValueError(f"hex {text!r} does not fit in {d_phi} bits")
        return cls(np.array([(value >> (d_phi - 1 - i)) & 1 for i in range(d_phi)], dtype=np.uint8))

    def digest(self) -> str:
        return hashlib.sha256(f"{self.d_phi}:{self.hex()}".encode()).hexdigest()

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float32)

    def __eq__(self, other) -> bool:
        return isinstance(other, Fingerprint) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash((self.d_phi, self.hex()))

    def __repr__(self) -> str:
        return f"Fingerprint(d_phi={self.d_phi}, hex={self.hex()!r})"


def sample_fingerprint(d_phi: int, seed: int) -> Fingerprint:
    if d_phi < 1:
        raise ValueError("d_phi must be >= 1")
    rng = np.random.default_rng(seed)
    return Fingerprint(rng.integers(0, 2, size=d_phi, dtype=np.uint8))


def sample_bits(rng: np.random.Generator, n: int, d_phi: int) -> np.ndarray:
    """``n`` fingerprints as an (n, d_phi) float32 0/1 matrix."""
    return rng.integers(0, 2, size=(n, d_phi)).astype(np.float32)


# ---------------------------------------------------------------- mapping network

def mapping_network(d_phi: int, rng: Optional[np.random.Generator]) -> Network:
    d_m = 4 * d_phi
    layers = [
        LayerSpec("map0", "dense", d_phi, d_m, activation="leaky_relu"),
        LayerSpec("map1", "dense", d_m, d_m),
    ]
    return Network("mapping", layers, init_params(layers, rng), {"d_phi": d_phi, "d_m": d_m})


def map_fingerprint(mapping: Network, phi) -> Tensor:
    """Run the mapping network on one fingerprint or an (n, d_phi) batch."""
    bits = phi.as_float() if isinstance(phi, Fingerprint) else np.asarray(phi.data if isinstance(phi, Tensor) else phi,
                                                                          dtype=np.float32)
    single = bits.ndim == 1
    d_phi = mapping.meta["d_phi"]
    if bits.shape[-1] != d_phi:
        raise ShapeError("map_fingerprint", f"fingerprint width {bits.shape[-1]} != mapping input {d_phi}")
    h = Tensor(bits.reshape(1, -1) if single else bits)
    for spec in mapping.layers:
        h = ad.dense(h, mapping.params[f"{spec.name}.weight"], mapping.params[f"{spec.name}.bias"])
        if spec.activation == "leaky_relu":
            h = ad.leaky_relu(h, 0.2)
    return ad.reshape(h, (mapping.meta["d_m"],)) if single else h


# ---------------------------------------------------------------- affine layers

def affine_layers(decoder: Network, d_m: int, rng: Optional[np.random.Generator] = None) -> Network:
    """One affine map per modulatable decoder layer: zero weights, unit bias.

    Passing ``rng`` draws small random weights instead (for tests).
    """
    layers = [LayerSpec(s.name, "dense", d_m, s.out_ch) for s in decoder.modulatable_layers()]
    params = {}
    for spec in layers:
        if rng is None:
            w = np.zeros((spec.out_ch, d_m), dtype=np.float32)
        else:
            w = (rng.standard_normal((spec.out_ch, d_m)) / np.sqrt(d_m)).astype(np.float32)
        params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True, name=f"{spec.name}.weight")
        params[f"{spec.name}.bias"] = Tensor(np.ones(spec.out_ch, dtype=np.float32), requires_grad=True,
                                             name=f"{spec.name}.bias")
    return Network("affine", layers, params, {"d_m": d_m})


def compute_style(affine: Network, w: Tensor, layers: Optional[Iterable[LayerSpec]] = None) -> dict:
    """Map a fingerprint representation to one scale vector per modulatable layer.

    ``w`` is (d_M,) for a single fingerprint or (n, d_M) for a batch.  When
    ``layers`` is given, every one of them must have an affine map.
    """
    wanted = list(layers) if layers is not None else list(affine.layers)
    style = {}
    single = w.ndim == 1
    x = ad.reshape(w, (1, w.shape[0])) if single else w
    for spec in wanted:
        key = f"{spec.name}.weight"
        if key not in affine.params:
            raise KeyError(f"no affine layer for modulatable decoder layer {spec.name!r}")
        u = ad.dense(x, affine.params[key], affine.params[f"{spec.name}.bias"])
        style[spec.name] = ad.reshape(u, (u.shape[1],)) if single else u
    return style


def identity_style(decoder: Network) -> dict:
    return {s.name: Tensor(np.ones(s.out_ch, dtype=np.float32)) for s in decoder.modulatable_layers()}


def modulate_weights(weight: Tensor, u: Tensor) -> Tensor:
    """Scale each output channel (axis 0) of ``weight`` by ``u``.

    out[j, ...] = u[j] * weight[j, ...].  A (B, out) ``u`` gives a stacked
    (B, *weight.shape) result, one modulated copy per row.
    """
    u = ad.as_tensor(u)
    if u.shape[-1] != weight.shape[0]:
        raise ShapeError("modulate_weights", f"scale length {u.shape[-1]} != output channels {weight.shape[0]}")
    return ad.broadcast_scale(weight, u, axis=0)


def style_for(mapping: Network, affine: Network, phi, layers=None) -> dict:
    return compute_style(affine, map_fingerprint(mapping, phi), layers)


def fingerprint_rows(phis: Iterable[Fingerprint]) -> np.ndarray:
    return np.stack([p.as_float() for p in phis])


def check_style(decoder: Network, style: Mapping) -> None:
    names = {s.name for s in decoder.modulatable_layers()}
    missing = names - set(style)
    extra = set(style) - names
    if missing or extra:
        raise ValueError(f"style/decoder mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
