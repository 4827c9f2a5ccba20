"""SSIM and the dark-channel-prior baseline."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import minimum_filter

from .errors import DimensionError
from .physics import invert_closed_form

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    x = sliding_window_view(x, k, axis=-1) @ g
    x = sliding_window_view(x, k, axis=-2) @ g
    return x


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every full window position; inputs are (H, W) or (C, H, W)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.shape[-1] < SSIM_WIN or a.shape[-2] < SSIM_WIN:
        raise DimensionError(f"image {a.shape[-2:]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM. Multi-channel inputs are scored per channel, then averaged."""
    m = ssim_map(a, b, data_range)
    if m.ndim == 3:
        return float(np.mean([c.mean() for c in m]))
    return float(m.mean())


# -----------------------------------------------------------------------------
# dark channel prior
# -----------------------------------------------------------------------------
def dark_channel(I: np.ndarray, window: int = 15) -> np.ndarray:
    if window < 1:
        raise ValueError("window must be >= 1")
    return minimum_filter(np.asarray(I).min(axis=0), size=window, mode="nearest")


def dcp_atmospheric_light(I: np.ndarray, window: int = 15, top: float = 0.001) -> np.ndarray:
    """Per-channel mean of ``I`` over the brightest ``top`` fraction of the dark channel.

    Every pixel tied with the cut-off value is included, so the estimate does
    not depend on pixel scan order.
    """
    I = np.asarray(I, dtype=np.float64)
    dark = dark_channel(I, window).reshape(-1)
    k = max(1, math.ceil(top * dark.size))
    cut = np.partition(dark, dark.size - k)[dark.size - k]
    sel = dark >= cut
    return I.reshape(I.shape[0], -1)[:, sel].mean(axis=1)


def dcp_transmission(I: np.ndarray, A, window: int = 15, omega: float = 0.95) -> np.ndarray:
    if not 0 < omega <= 1:
        raise ValueError("omega must lie in (0, 1]")
    A = np.maximum(np.asarray(A, dtype=np.float64).reshape(-1, 1, 1), 1e-6)
    dark = np.clip(dark_channel(np.asarray(I) / A, window), 0.0, 1.0)
    return 1.0 - omega * dark


def dcp_estimate(I: np.ndarray, window: int = 15, omega: float = 0.95, t_floor: float = 0.1):
    """Returns ``(J, t, A)`` estimated with the dark channel prior."""
    A = dcp_atmospheric_light(I, window)
    t = dcp_transmission(I, A, window, omega)
    return invert_closed_form(I, t, A, t_floor), t, A


def dcp_dehaze(I: np.ndarray, window: int = 15, omega: float = 0.95, t_floor: float = 0.1) -> np.ndarray:
    return dcp_estimate(I, window, omega, t_floor)[0]
