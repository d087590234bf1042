"""Full-reference image quality: PSNR and SSIM."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidInputError

__all__ = ["SsimParams", "psnr", "ssim", "gaussian_window"]


@dataclass(frozen=True)
class SsimParams:
    """Window and stabilizing constants of the standard SSIM formulation."""

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    peak: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidInputError(f"window must be a positive odd integer, got {self.window}")
        if not (self.k1 > 0 and self.k2 > 0 and self.peak > 0 and self.sigma > 0):
            raise InvalidInputError("k1, k2, sigma and peak must be positive")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    if not peak > 0:
        raise InvalidInputError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def gaussian_window(size, sigma):
    """Normalized 1D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over both axes
    w = len(g)
    out = np.lib.stride_tricks.sliding_window_view(img, w, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(out, w, axis=1) @ g


def _ssim_2d(a, b, p):
    g = gaussian_window(p.window, p.sigma)
    c1 = (p.k1 * p.peak) ** 2
    c2 = (p.k2 * p.peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b, params=None):
    """Mean SSIM over all fully contained Gaussian windows.

    Volumes are handled slice by slice along the last axis and averaged.
    """
    p = params or SsimParams()
    a, b = _pair(a, b)
    if a.ndim not in (2, 3):
        raise DimensionError(f"ssim needs rank 2 or 3, got {a.shape}")
    if a.shape[0] < p.window or a.shape[1] < p.window:
        raise DimensionError(f"image {a.shape} is smaller than the {p.window}x{p.window} window")
    if a.ndim == 2:
        return _ssim_2d(a, b, p)
    return float(np.mean([_ssim_2d(a[..., z], b[..., z], p) for z in range(a.shape[2])]))
