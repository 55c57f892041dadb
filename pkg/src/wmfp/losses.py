"""Training objectives: fingerprint BCE, image quality, and the robust variant."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .fpdecoder import decode_logits
from .generator import decode
from .nets import LayerSpec, Network, init_params, run_layers
from .seeding import rng_for

LOGIT_CLIP = 15.0
_FEATURES: dict = {}


class DivergenceError(RuntimeError):
    """A loss or metric left the finite/sane range; training must stop."""


def perceptual_extractor() -> Network:
    """Fixed random 3-layer conv feature extractor shared by every pipeline."""
    if "net" not in _FEATURES:
        layers = [
            LayerSpec("feat0", "conv", 3, 8, 3, stride=1, padding=1, activation="relu"),
            LayerSpec("feat1", "conv", 8, 16, 3, stride=2, padding=1, activation="relu"),
            LayerSpec("feat2", "conv", 16, 32, 3, stride=2, padding=1, activation="relu"),
        ]
        net = Network("perceptual", layers, init_params(layers, rng_for(0, "perceptual-features")))
        net.requires_grad_(False)
        _FEATURES["net"] = net
    return _FEATURES["net"]


def _batch(x) -> Tensor:
    t = ad.as_tensor(x)
    return ad.reshape(t, (1,) + t.shape) if t.ndim == 3 else t


def feature_distance(x, x_hat) -> Tensor:
    """Mean squared activation difference, averaged over the extractor's layers."""
    net = perceptual_extractor()
    _, fa = run_layers(net, _batch(x), collect=True)
    _, fb = run_layers(net, _batch(x_hat), collect=True)
    terms = [ad.mean(ad.square(ad.sub(a, b))) for a, b in zip(fa, fb)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def loss_quality(x, x_hat) -> Tensor:
    """MSE(x, x_hat) plus the random-feature perceptual distance."""
    x, x_hat = ad.as_tensor(x), ad.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError("loss_quality", f"image shapes differ: {x.shape} vs {x_hat.shape}")
    mse = ad.mean(ad.square(ad.sub(x, x_hat)))
    return ad.add(mse, feature_distance(x, x_hat))


def bce_from_logits(logits: Tensor, bits) -> Tensor:
    """Per-sample sum of bitwise BCE, averaged over the batch.

    Logits are clamped to +-15 first.  softplus(l) - b*l equals
    -[b log s(l) + (1 - b) log(1 - s(l))].
    """
    bits = np.asarray(bits.data if isinstance(bits, Tensor) else bits, dtype=logits.dtype)
    if bits.shape != logits.shape:
        raise ShapeError("loss_phi", f"bits {bits.shape} vs logits {logits.shape}")
    l = ad.clamp(logits, -LOGIT_CLIP, LOGIT_CLIP)
    per_bit = ad.sub(ad.softplus(l), ad.mul(l, bits))
    if per_bit.ndim == 1:
        loss = ad.sum(per_bit)
    else:
        loss = ad.mean(ad.sum(per_bit, axis=1))
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite fingerprint loss {float(loss.data)}")
    return loss


def _bits(phi) -> np.ndarray:
    from .codec import Fingerprint

    if isinstance(phi, Fingerprint):
        return phi.as_float()
    return np.asarray(phi, dtype=np.float32)


def loss_phi(fpdec: Network, decoder: Network, style, z, phi) -> Tensor:
    x_hat = decode(decoder, style, z)
    return bce_from_logits(decode_logits(fpdec, x_hat), _bits(phi))


def loss_robust(fpdec: Network, decoder: Network, style, z, phi, attack) -> Tensor:
    """loss_phi with the post-processing ``attack`` applied before decoding.

    ``attack`` is an AttackSpec or, for batched latents, a list of them.
    """
    from .attacks import apply

    x_hat = decode(decoder, style, z)
    return bce_from_logits(decode_logits(fpdec, apply(attack, x_hat)), _bits(phi))
