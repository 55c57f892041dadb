"""Desk-scale autoencoder with a modulatable decoder, and weight baking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .codec import Fingerprint, check_style, modulate_weights
from .nets import LayerSpec, Network, init_params, run_layers, with_flags

LATENT_CHANNELS = 8
VARIANTS = ("conv-only", "all")


def encoder_network(rng: Optional[np.random.Generator], latent_channels: int = LATENT_CHANNELS) -> Network:
    layers = [
        LayerSpec("enc0", "conv", 3, 16, 3, stride=2, padding=1, activation="leaky_relu"),
        LayerSpec("enc1", "conv", 16, 32, 3, stride=2, padding=1, activation="leaky_relu"),
        LayerSpec("enc2", "conv", 32, latent_channels, 3, stride=1, padding=1),
    ]
    return Network("encoder", layers, init_params(layers, rng), {"latent_channels": latent_channels})


def decoder_layers(latent_channels: int = LATENT_CHANNELS) -> list:
    return [
        LayerSpec("dec_in", "conv", latent_channels, 32, 3, padding=1, activation="leaky_relu"),
        LayerSpec("up0", "upsample", 32, 32, stride=2),
        LayerSpec("dec_up0", "conv", 32, 32, 3, padding=1, activation="leaky_relu"),
        LayerSpec("up1", "upsample", 32, 32, stride=2),
        LayerSpec("dec_up1", "conv", 32, 16, 3, padding=1, activation="leaky_relu"),
        LayerSpec("attn", "attention", 16, 16),
        LayerSpec("dec_out", "conv", 16, 3, 3, padding=1, activation="clamp"),
    ]


def modulated_names(layers: list, variant: str) -> set:
    if variant == "conv-only":
        return {s.name for s in layers if s.kind == "conv"}
    if variant == "all":
        return {s.name for s in layers if s.kind in ("conv", "attention")}
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def decoder_network(rng: Optional[np.random.Generator], variant: str = "all",
                    latent_channels: int = LATENT_CHANNELS) -> Network:
    base = decoder_layers(latent_channels)
    layers = with_flags(base, modulated_names(base, variant))
    return Network("decoder", layers, init_params(layers, rng), {"variant": variant,
                                                                 "latent_channels": latent_channels})


def set_variant(decoder: Network, variant: str) -> Network:
    """The same decoder weights with the modulatable flags of ``variant``."""
    out = decoder.copy()
    out.layers = with_flags(out.layers, modulated_names(out.layers, variant))
    out.meta["variant"] = variant
    return out


def _as_batch(x, kind: str) -> tuple:
    t = ad.as_tensor(x)
    if t.ndim == 3:
        return ad.reshape(t, (1,) + t.shape), True
    if t.ndim != 4:
        raise ShapeError(kind, f"expected (C, H, W) or (B, C, H, W), got {t.shape}")
    return t, False


def encode(encoder: Network, x) -> Tensor:
    """Image(s) in [0, 1] of shape 3xHxW (H, W multiples of 4) -> latent c_z x H/4 x W/4."""
    xb, single = _as_batch(x, "encode")
    if xb.shape[1] != 3 or xb.shape[2] % 4 or xb.shape[3] % 4:
        raise ShapeError("encode", f"image must be 3 x H x W with H, W multiples of 4, got {xb.shape[1:]}")
    z = run_layers(encoder, xb)
    return ad.reshape(z, z.shape[1:]) if single else z


def modulated_weights(decoder: Network, style: Mapping) -> dict:
    check_style(decoder, style)
    return {s.name: modulate_weights(decoder.params[f"{s.name}.weight"], style[s.name])
            for s in decoder.modulatable_layers()}


def decode(decoder: Network, style: Optional[Mapping], z) -> Tensor:
    """Run the decoder with each flagged layer's weight scaled by its style vector.

    Style vectors of shape (d_j,) modulate the whole batch; (B, d_j) vectors
    modulate sample b with row b.  ``style=None`` runs the plain weights.
    """
    zb, single = _as_batch(z, "decode")
    if zb.shape[1] != decoder.meta["latent_channels"]:
        raise ShapeError("decode", f"latent has {zb.shape[1]} channels, decoder expects "
                                   f"{decoder.meta['latent_channels']}")
    weights = modulated_weights(decoder, style) if style is not None else None
    x = run_layers(decoder, zb, weights)
    return ad.reshape(x, x.shape[1:]) if single else x


@dataclass
class StampedDecoder:
    """A decoder with one user's modulation folded in; takes latents only."""

    network: Network
    fingerprint_hash: str

    def forward(self, z) -> Tensor:
        return decode(self.network, None, z)

    __call__ = forward


def stamp(decoder: Network, style: Mapping, fingerprint_hash: str = "") -> StampedDecoder:
    """Fold ``style`` into the decoder weights (single fingerprint styles only)."""
    for name, u in style.items():
        if ad.as_tensor(u).ndim != 1:
            raise ShapeError("stamp", f"style for {name} must be a single vector, got {ad.as_tensor(u).shape}")
    weights = modulated_weights(decoder, style)
    params = {}
    for key, p in decoder.params.items():
        layer = key.rsplit(".", 1)[0]
        data = weights[layer].data if key.endswith(".weight") and layer in weights else p.data
        params[key] = Tensor(np.array(data, dtype=np.float32, copy=True), name=key)
    meta = dict(decoder.meta)
    meta["fingerprint_hash"] = fingerprint_hash
    return StampedDecoder(Network("stamped_decoder", list(decoder.layers), params, meta), fingerprint_hash)


def stamp_fingerprint(decoder: Network, mapping: Network, affine: Network, phi: Fingerprint) -> StampedDecoder:
    from .codec import style_for

    style = {k: Tensor(v.data) for k, v in style_for(mapping, affine, phi, decoder.modulatable_layers()).items()}
    return stamp(decoder, style, phi.digest())
