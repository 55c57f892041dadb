"""Fingerprint decoding network: image -> d_phi logits -> bits."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .codec import Fingerprint
from .nets import LayerSpec, Network, init_params, run_layers


def fingerprint_decoder(d_phi: int, rng: Optional[np.random.Generator], resolution: int = 32,
                        widths=(32, 64, 128, 128)) -> Network:
    layers = []
    c = 3
    for i, w in enumerate(widths):
        layers.append(LayerSpec(f"block{i}", "conv", c, w, 3, stride=2, padding=1, activation="leaky_relu"))
        c = w
    layers.append(LayerSpec("head", "dense", c, d_phi))
    return Network("fpdecoder", layers, init_params(layers, rng), {"d_phi": d_phi, "resolution": resolution})


def decode_logits(net: Network, x) -> Tensor:
    t = ad.as_tensor(x)
    single = t.ndim == 3
    if single:
        t = ad.reshape(t, (1,) + t.shape)
    res = net.meta["resolution"]
    if t.ndim != 4 or t.shape[1:] != (3, res, res):
        raise ShapeError("decode_logits", f"expected 3 x {res} x {res} images, got {t.shape[1:]}")
    logits = run_layers(net, t)
    return ad.reshape(logits, (logits.shape[1],)) if single else logits


def bits_from_logits(logits: np.ndarray) -> np.ndarray:
    """Bit = 1 where sigmoid(logit) > 0.5, i.e. logit > 0; ties go to 0."""
    return (np.asarray(logits) > 0).astype(np.uint8)


def decode_bits(net: Network, x):
    """Single image -> Fingerprint; a batch -> (B, d_phi) uint8 array."""
    logits = decode_logits(net, x).data
    bits = bits_from_logits(logits)
    return Fingerprint(bits) if bits.ndim == 1 else bits
