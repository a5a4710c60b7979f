# metrics.py - full-reference quality metrics (PSNR, SSIM) plus a haziness score
#
# SSIM follows Wang et al. 2004: 11x11 Gaussian window (sigma 1.5), K1=0.01,
# K2=0.03, peak 1.0, averaged over valid window positions (no padding) and
# then over the RGB channels.
# reference: https://ece.uwaterloo.ca/~z70wang/research/ssim/
#
# ssim_with_grad also returns d SSIM / d a, which the physical loss needs.

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from hazeforge.imgcore import ImageError, PlanarImage, ensure_same_shape
from hazeforge.priors.dcp import dark_channel

WIN_SIZE = 11
WIN_SIGMA = 1.5
K1 = 0.01
K2 = 0.03
PEAK = 1.0
HAZINESS_RADIUS = 7

_HALF = WIN_SIZE // 2
_C1 = (K1 * PEAK) ** 2
_C2 = (K2 * PEAK) ** 2


def _gaussian_taps() -> np.ndarray:
    x = np.arange(WIN_SIZE) - _HALF
    g = np.exp(-(x * x) / (2.0 * WIN_SIGMA ** 2))
    return g / g.sum()


_TAPS = _gaussian_taps()


def _window(x: np.ndarray) -> np.ndarray:
    # separable Gaussian, valid positions only
    y = ndimage.correlate1d(x, _TAPS, axis=0, mode="constant")
    y = ndimage.correlate1d(y, _TAPS, axis=1, mode="constant")
    return y[_HALF:-_HALF, _HALF:-_HALF]


def _window_adjoint(g: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = g
    y = ndimage.correlate1d(full, _TAPS, axis=0, mode="constant")
    return ndimage.correlate1d(y, _TAPS, axis=1, mode="constant")


@dataclass
class MetricReport:
    psnr: float        # dB, math.inf for identical images
    ssim: float
    haziness: float


def psnr(a: PlanarImage, b: PlanarImage) -> float:
    ensure_same_shape(a, b, "psnr")
    mse = float(np.mean((a.data - b.data) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def _check_window(a: PlanarImage) -> None:
    if a.height < WIN_SIZE or a.width < WIN_SIZE:
        raise ImageError(f"ssim needs at least {WIN_SIZE}x{WIN_SIZE} pixels, got {a.height}x{a.width}")


def _ssim_plane(a: np.ndarray, b: np.ndarray, want_grad: bool):
    mu_a, mu_b = _window(a), _window(b)
    e_aa, e_bb, e_ab = _window(a * a), _window(b * b), _window(a * b)
    a1 = 2.0 * mu_a * mu_b + _C1
    a2 = 2.0 * (e_ab - mu_a * mu_b) + _C2
    b1 = mu_a * mu_a + mu_b * mu_b + _C1
    b2 = (e_aa - mu_a * mu_a) + (e_bb - mu_b * mu_b) + _C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not want_grad:
        return value, None

    m = smap.size
    denom = b1 * b2
    d_mu = (2.0 * mu_b * (a2 - a1) / denom - 2.0 * mu_a * smap / b1 + 2.0 * mu_a * smap / b2) / m
    d_eaa = -smap / b2 / m
    d_eab = 2.0 * a1 / denom / m
    shape = a.shape
    grad = (_window_adjoint(d_mu, shape)
            + 2.0 * a * _window_adjoint(d_eaa, shape)
            + b * _window_adjoint(d_eab, shape))
    return value, grad


def ssim_with_grad(a: PlanarImage, b: PlanarImage) -> Tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to a, shape (channels, height, width)."""
    ensure_same_shape(a, b, "ssim")
    _check_window(a)
    values, grads = [], []
    for pa, pb in zip(a.data, b.data):
        v, g = _ssim_plane(pa, pb, True)
        values.append(v)
        grads.append(g)
    c = a.channels
    return sum(values) / c, np.stack(grads) / c


def ssim(a: PlanarImage, b: PlanarImage) -> float:
    ensure_same_shape(a, b, "ssim")
    _check_window(a)
    return sum(_ssim_plane(pa, pb, False)[0] for pa, pb in zip(a.data, b.data)) / a.channels


def haziness(img: PlanarImage) -> float:
    """Mean dark channel; 0 for haze-free textures, 1 for a white frame."""
    return float(dark_channel(img, HAZINESS_RADIUS).data.mean())


def evaluate(pred: PlanarImage, ref: PlanarImage) -> MetricReport:
    return MetricReport(psnr=psnr(pred, ref), ssim=ssim(pred, ref), haziness=haziness(pred))


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"
