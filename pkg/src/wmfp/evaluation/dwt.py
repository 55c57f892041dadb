"""Baseline watermarker: one-level Haar DWT with quantization index modulation.

Each bit is carried by one mid-band (LH or HL) coefficient of the luminance
channel.  Bit b snaps the coefficient onto the lattice ``step * Z + b * step / 2``.
"""

from __future__ import annotations

import numpy as np

from ..codec import Fingerprint
from ..seeding import rng_for

DEFAULT_STEP = 8 / 255
_LUMA = np.array([0.299, 0.587, 0.114])


class CapacityError(ValueError):
    pass


def haar2(y: np.ndarray) -> tuple:
    """Orthonormal one-level Haar transform of an (H, W) array -> LL, LH, HL, HH."""
    a, b = y[0::2, 0::2], y[0::2, 1::2]
    c, d = y[1::2, 0::2], y[1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2
    hh = (a - b - c + d) / 2
    return ll, lh, hl, hh


def ihaar2(ll, lh, hl, hh) -> np.ndarray:
    h, w = ll.shape
    y = np.empty((2 * h, 2 * w), dtype=np.float64)
    y[0::2, 0::2] = (ll + lh + hl + hh) / 2
    y[0::2, 1::2] = (ll + lh - hl - hh) / 2
    y[1::2, 0::2] = (ll - lh + hl - hh) / 2
    y[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return y


def _positions(shape: tuple, d_phi: int, seed: int) -> np.ndarray:
    h, w = shape
    if h % 2 or w % 2:
        raise ValueError(f"image side must be even, got {h}x{w}")
    available = 2 * (h // 2) * (w // 2)
    if d_phi > available:
        raise CapacityError(f"{d_phi} bits exceed the {available} mid-band coefficients of a {h}x{w} image")
    return rng_for(seed, "dwt/positions").permutation(available)[:d_phi]


def _midband(y: np.ndarray) -> tuple:
    ll, lh, hl, hh = haar2(y)
    return ll, np.concatenate([lh.ravel(), hl.ravel()]), hh


def _bits(phi) -> np.ndarray:
    return phi.bits if isinstance(phi, Fingerprint) else np.asarray(phi, dtype=np.uint8)


def dwt_embed(x: np.ndarray, phi, step: float = DEFAULT_STEP, seed: int = 0) -> np.ndarray:
    """Embed ``phi`` into a (3, H, W) image in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    bits = _bits(phi).astype(np.float64)
    pos = _positions(x.shape[1:], bits.size, seed)
    y = np.tensordot(_LUMA, x, axes=1)
    ll, mid, hh = _midband(y)
    c = mid[pos]
    offset = bits * step / 2
    mid = mid.copy()
    mid[pos] = np.round((c - offset) / step) * step + offset
    n = ll.size
    y_new = ihaar2(ll, mid[:n].reshape(ll.shape), mid[n:].reshape(ll.shape), hh)
    # the luma weights sum to one, so adding dy to every channel moves Y by dy
    out = x + (y_new - y)[None]
    return _fit_blocks(out).astype(np.float32)


def _fit_blocks(x: np.ndarray) -> np.ndarray:
    """Shift each 2x2 block uniformly so it fits in [0, 1].

    A uniform block shift only touches the LL coefficient, so embedded bits
    survive; blocks whose span exceeds 1 are clipped.
    """
    c, h, w = x.shape
    blocks = x.reshape(c, h // 2, 2, w // 2, 2)
    lo = blocks.min(axis=(0, 2, 4))
    hi = blocks.max(axis=(0, 2, 4))
    shift = np.where(lo < 0, -lo, 0.0) + np.where(hi > 1, 1 - hi, 0.0)
    blocks = blocks + shift[None, :, None, :, None]
    return np.clip(blocks.reshape(c, h, w), 0.0, 1.0)


def dwt_extract(x: np.ndarray, d_phi: int, step: float = DEFAULT_STEP, seed: int = 0) -> Fingerprint:
    x = np.asarray(x, dtype=np.float64)
    pos = _positions(x.shape[1:], d_phi, seed)
    _, mid, _ = _midband(np.tensordot(_LUMA, x, axes=1))
    c = mid[pos]
    err0 = np.abs(c - np.round(c / step) * step)
    half = step / 2
    err1 = np.abs(c - (np.round((c - half) / step) * step + half))
    return Fingerprint((err1 < err0).astype(np.uint8))
