"""Attribution accuracy and the image-quality proxies."""

from __future__ import annotations

import numpy as np

from ..codec import Fingerprint

INF = float("inf")


def _bits(phi) -> np.ndarray:
    return phi.bits if isinstance(phi, Fingerprint) else np.asarray(phi)


def attribution_accuracy(phi, phi_hat) -> float:
    """Fraction of matching bits; arrays of shape (n, d) give the mean over rows."""
    a, b = _bits(phi), _bits(phi_hat)
    if a.shape != b.shape:
        raise ValueError(f"fingerprint lengths differ: {a.shape} vs {b.shape}")
    return float(np.mean(a.astype(np.uint8) == b.astype(np.uint8)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return INF
    return float(10 * np.log10(1.0 / mse))


def proxy_distance(x_ref: np.ndarray, x_fp: np.ndarray, chunk: int = 256) -> float:
    """Mean random-feature distance, the feature term of the quality loss."""
    from ..autodiff import Tensor
    from ..losses import feature_distance

    total = 0.0
    for i in range(0, len(x_ref), chunk):
        a, b = x_ref[i:i + chunk], x_fp[i:i + chunk]
        total += float(feature_distance(Tensor(a), Tensor(b)).data) * len(a)
    return total / len(x_ref)


def quality_metrics(x_ref: np.ndarray, x_fp: np.ndarray) -> dict:
    """PSNR of the whole paired set and the perceptual proxy.

    PSNR uses the pooled MSE; identical sets report the string "inf".
    """
    x_ref, x_fp = np.asarray(x_ref), np.asarray(x_fp)
    if x_ref.shape != x_fp.shape:
        raise ValueError(f"paired sets differ in shape: {x_ref.shape} vs {x_fp.shape}")
    if len(x_ref) == 0:
        raise ValueError("empty image set")
    if x_ref.ndim == 3:
        x_ref, x_fp = x_ref[None], x_fp[None]
    value = psnr(x_ref, x_fp)
    return {"psnr": "inf" if value == INF else value, "proxy": proxy_distance(x_ref, x_fp)}


def chance_band(n_images: int, d_phi: int, sigmas: float = 4.0) -> tuple:
    half = sigmas * np.sqrt(0.25 / (n_images * d_phi))
    return 0.5 - half, 0.5 + half
