"""Reconstruction metrics (MSE, PSNR, SSIM, MS-SSIM) and the healthiness ratio."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .volume import Volume, VolumeError, as_mask, check_same_grid, downsample_avg2

DEFAULT_MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class MetricConfig:
    psnr_max: float = 1.0
    ssim_c1: float = 0.01
    ssim_c2: float = 0.03
    msssim_levels: int = 5
    msssim_weights: List[float] = field(default_factory=lambda: list(DEFAULT_MSSSIM_WEIGHTS))
    # 0 keeps the global-statistics SSIM; >0 averages SSIM maps over cubic windows
    ssim_window: int = 0

    def __post_init__(self):
        if len(self.msssim_weights) != self.msssim_levels:
            raise ValueError("msssim_weights length must equal msssim_levels")
        if min(self.psnr_max, self.ssim_c1, self.ssim_c2) <= 0 or self.msssim_levels < 1:
            raise ValueError("metric constants must be positive")
        if self.ssim_window < 0:
            raise ValueError("ssim_window must be >= 0")


@dataclass
class ImageMetrics:
    mse: float
    psnr: float
    ssim: float
    ms_ssim: float


def _pair(x: Volume, y: Volume) -> Tuple[np.ndarray, np.ndarray]:
    check_same_grid(x, y)
    return np.asarray(x.data, dtype=np.float64), np.asarray(y.data, dtype=np.float64)


def mse(x: Volume, y: Volume) -> float:
    a, b = _pair(x, y)
    return float(np.mean((a - b) ** 2))


def psnr(x: Volume, y: Volume, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(max_val**2 / err))


def _components(a: np.ndarray, b: np.ndarray, c1: float, c2: float) -> Tuple[float, float]:
    """Luminance term and the combined contrast-structure term from global statistics.

    With c3 = c2/2 the product c*s collapses to (2 cov + c2) / (var_a + var_b + c2).
    """
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = np.mean(da * da), np.mean(db * db)
    cov = np.mean(da * db)
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(lum), float(cs)


def _windowed_ssim(a: np.ndarray, b: np.ndarray, c1: float, c2: float, size: int) -> float:
    f = lambda arr: ndimage.uniform_filter(arr, size=size, mode="reflect")  # noqa: E731
    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(smap.mean())


def ssim(x: Volume, y: Volume, cfg: Optional[MetricConfig] = None) -> float:
    cfg = cfg or MetricConfig()
    a, b = _pair(x, y)
    if cfg.ssim_window:
        return _windowed_ssim(a, b, cfg.ssim_c1, cfg.ssim_c2, cfg.ssim_window)
    if np.array_equal(a, b):
        return 1.0
    lum, cs = _components(a, b, cfg.ssim_c1, cfg.ssim_c2)
    return lum * cs


def ms_ssim(x: Volume, y: Volume, cfg: Optional[MetricConfig] = None) -> float:
    """Multi-scale SSIM over ``cfg.msssim_levels`` scales of 2x average pooling.

    Scale j uses the weight j for its contrast-structure term; the luminance
    term enters only at the coarsest scale.
    """
    cfg = cfg or MetricConfig()
    check_same_grid(x, y)
    levels = cfg.msssim_levels
    need = 2 ** (levels - 1) * 2
    if min(x.dims) < need:
        raise VolumeError(
            f"volume too small for {levels} MS-SSIM levels: min dim {min(x.dims)} < {need}"
        )
    if np.array_equal(x.data, y.data):
        return 1.0
    value = 1.0
    for j, w in enumerate(cfg.msssim_weights):
        if j > 0:
            x, y = downsample_avg2(x), downsample_avg2(y)
        lum, cs = _components(
            np.asarray(x.data, dtype=np.float64),
            np.asarray(y.data, dtype=np.float64),
            cfg.ssim_c1,
            cfg.ssim_c2,
        )
        value *= _signed_pow(cs, w)
        if j == levels - 1:
            value *= _signed_pow(lum, w)
    return float(value)


def _signed_pow(base: float, exponent: float) -> float:
    # negative contrast-structure terms (anti-correlated images) keep their sign
    return math.copysign(abs(base) ** exponent, base)


def image_metrics(x: Volume, y: Volume, cfg: Optional[MetricConfig] = None) -> ImageMetrics:
    cfg = cfg or MetricConfig()
    return ImageMetrics(
        mse=mse(x, y),
        psnr=psnr(x, y, cfg.psnr_max),
        ssim=ssim(x, y, cfg),
        ms_ssim=ms_ssim(x, y, cfg),
    )


def healthiness(x: Volume, anomaly_mask: Volume, brain_mask: Volume) -> float:
    """Mean uptake inside the anomaly mask over mean uptake in the rest of the brain."""
    check_same_grid(x, anomaly_mask, brain_mask)
    inside = as_mask(anomaly_mask) & as_mask(brain_mask)
    outside = as_mask(brain_mask) & ~as_mask(anomaly_mask)
    if not inside.any():
        raise VolumeError("empty region: anomaly mask has no voxels inside the brain")
    if not outside.any():
        raise VolumeError("empty region: brain minus anomaly mask is empty")
    a = np.asarray(x.data, dtype=np.float64)
    return float((a[inside].sum() / inside.sum()) / (a[outside].sum() / outside.sum()))
