# dcp.py - dark channel prior dehazer
# pipeline: dark channel -> atmospheric light -> raw transmission ->
# guided-filter refinement -> radiance recovery
#
# based on He, Sun, Tang "Single Image Haze Removal Using Dark Channel Prior"
# the soft matting step is replaced by the guided filter (closed form, O(N)):
# http://research.microsoft.com/en-us/um/people/kahe/eccv10/

from __future__ import annotations

import logging
import math

import numpy as np

from hazeforge.imgcore import (
    PlanarImage, box_mean, box_mean_adjoint, ensure_rgb, ensure_same_shape,
    luminance, min_channel, window_extremum,
)
from hazeforge.models import DcpConfig
from hazeforge.priors.result import A_MIN, Atmosphere, PriorResult

logger = logging.getLogger(__name__)

# below this the guided filter treats a window as flat (a = 0)
_FLAT = 1e-12


def dark_channel(img: PlanarImage, patch_radius: int) -> PlanarImage:
    return window_extremum(min_channel(img), patch_radius, "min")


def estimate_atmospheric_light(img: PlanarImage, dark: PlanarImage,
                               bright_fraction: float) -> Atmosphere:
    ensure_rgb(img, "estimate_atmospheric_light")
    if dark.shape[1:] != img.shape[1:]:
        raise ValueError("dark channel and image sizes differ")
    n_pix = img.width * img.height
    # small epsilon so 0.01 * 100 doesn't become 2 through rounding
    count = min(n_pix, max(1, math.ceil(bright_fraction * n_pix - 1e-9)))

    # stable sort on the negated values: ties keep row-major order, smallest first
    order = np.argsort(-dark.data[0].ravel(), kind="stable")[:count]
    pixels = img.data.reshape(3, -1)[:, order]
    rgb = np.clip(pixels.mean(axis=1), A_MIN, 1.0)
    return Atmosphere(tuple(rgb))


def _atm_column(atm: Atmosphere) -> np.ndarray:
    return np.asarray(atm.rgb, dtype=np.float64)[:, None, None]


def raw_transmission(img: PlanarImage, atm: Atmosphere, cfg: DcpConfig) -> PlanarImage:
    """t_raw = 1 - omega * dark(I / A), before clamping."""
    ensure_rgb(img, "estimate_transmission")
    ratio = np.clip(img.data / _atm_column(atm), 0.0, 1.0)
    dark = dark_channel(PlanarImage(ratio), cfg.patch_radius)
    return PlanarImage(1.0 - cfg.omega * dark.data)


def estimate_transmission(img: PlanarImage, atm: Atmosphere, cfg: DcpConfig) -> PlanarImage:
    t_raw = raw_transmission(img, atm, cfg)
    return PlanarImage(np.clip(t_raw.data, cfg.t_floor, 1.0))


def _guided_coefficients(guide: np.ndarray, radius: int, eps: float):
    mean_i = box_mean(guide, radius)
    var_i = np.maximum(box_mean(guide * guide, radius) - mean_i * mean_i, 0.0)
    denom = var_i + eps
    inv = np.where(denom > _FLAT, 1.0 / np.maximum(denom, _FLAT), 0.0)
    return mean_i, inv


def _guided2d(p: np.ndarray, guide: np.ndarray, radius: int, eps: float) -> np.ndarray:
    mean_i, inv = _guided_coefficients(guide, radius, eps)
    mean_p = box_mean(p, radius)
    cov_ip = box_mean(guide * p, radius) - mean_i * mean_p
    a = cov_ip * inv
    b = mean_p - a * mean_i
    return box_mean(a, radius) * guide + box_mean(b, radius)


def _guided2d_adjoint(g: np.ndarray, guide: np.ndarray, radius: int, eps: float) -> np.ndarray:
    # transpose of p -> guided(p) for a fixed guide
    mean_i, inv = _guided_coefficients(guide, radius, eps)
    g_a = box_mean_adjoint(g * guide, radius)
    g_b = box_mean_adjoint(g, radius)
    g_mean_p = g_b.copy()
    g_a = g_a - g_b * mean_i
    g_cov = g_a * inv
    g_mean_p -= g_cov * mean_i
    return guide * box_mean_adjoint(g_cov, radius) + box_mean_adjoint(g_mean_p, radius)


def guided_filter(p: PlanarImage, guide: PlanarImage, radius: int, eps: float) -> PlanarImage:
    if p.channels != 1 or guide.channels != 1:
        raise ValueError("guided_filter works on single-channel images")
    ensure_same_shape(p, guide, "guided_filter")
    return PlanarImage(_guided2d(p.data[0], guide.data[0], radius, eps))


def guided_filter_adjoint(grad: np.ndarray, guide: PlanarImage, radius: int, eps: float) -> np.ndarray:
    """Adjoint of guided_filter as a linear map of p; grad is a 2D array."""
    return _guided2d_adjoint(np.asarray(grad, dtype=np.float64), guide.data[0], radius, eps)


def recover_radiance(img: PlanarImage, t: PlanarImage, atm: Atmosphere,
                     t_floor: float, clamp: bool = True) -> PlanarImage:
    ensure_rgb(img, "recover_radiance")
    a = _atm_column(atm)
    j = (img.data - a) / np.maximum(t.data, t_floor) + a
    if clamp:
        j = np.clip(j, 0.0, 1.0)
    return PlanarImage(j)


def dehaze_dcp(img: PlanarImage, cfg: DcpConfig = DcpConfig()) -> PriorResult:
    cfg.validate()
    ensure_rgb(img, "dehaze_dcp")

    dark = dark_channel(img, cfg.patch_radius)
    logger.debug("dark channel range [%.3f, %.3f]", dark.data.min(), dark.data.max())

    atm = estimate_atmospheric_light(img, dark, cfg.bright_fraction)
    logger.debug("atmospheric light A = (%.3f, %.3f, %.3f)", *atm.rgb)

    t_raw = raw_transmission(img, atm, cfg)
    t_est = PlanarImage(np.clip(t_raw.data, cfg.t_floor, 1.0))

    refined = guided_filter(t_est, luminance(img), cfg.effective_guide_radius, cfg.guide_eps)
    # the guided filter can overshoot a little, clamp again
    t_ref = PlanarImage(np.clip(refined.data, cfg.t_floor, 1.0))
    logger.debug("refined transmission range [%.3f, %.3f]", t_ref.data.min(), t_ref.data.max())

    radiance = recover_radiance(img, t_ref, atm, cfg.t_floor)
    return PriorResult(
        radiance=radiance,
        transmission=t_ref,
        atmosphere=atm,
        maps={"dark": dark, "t_raw": t_est, "t_refined": t_ref},
        stats={"atmosphere": atm.rgb},
    )
