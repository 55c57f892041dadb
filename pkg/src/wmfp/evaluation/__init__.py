"""Metrics, the DWT baseline and the experiment harnesses."""

from .dwt import CapacityError, dwt_embed, dwt_extract
from .metrics import attribution_accuracy, chance_band, proxy_distance, psnr, quality_metrics

__all__ = ["CapacityError", "dwt_embed", "dwt_extract", "attribution_accuracy", "chance_band",
           "proxy_distance", "psnr", "quality_metrics"]
