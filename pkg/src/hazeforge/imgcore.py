# imgcore.py - the planar raster type and the sliding-window primitives
# every prior dehazer is built from (box filter, windowed min/max)
#
# windows are "shrink-to-valid": they are clipped at the border and the box
# filter divides by the number of in-bounds pixels, so constant images are
# fixed points everywhere including the edges.
#
# box filter uses running sums along each axis, same idea as the cumsum box
# filter in the guided filter reference code:
# http://research.microsoft.com/en-us/um/people/kahe/eccv10/

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import cv2
import numpy as np

logger = logging.getLogger(__name__)

# Rec. 601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PlanarImage:
    """Float raster stored plane by plane, shape (channels, height, width).

    Samples are nominally in [0, 1] (gamma-encoded, no linearization).
    Two-channel images only carry gate maps; files are 1 or 3 channels.
    """
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise ImageError(f"expected a (channels, height, width) array, got shape {arr.shape}")
        c, h, w = arr.shape
        if c not in (1, 2, 3):
            raise ImageError(f"channel count must be 1, 2 or 3, got {c}")
        if h == 0 or w == 0:
            raise ImageError("zero-sized image")
        if not np.all(np.isfinite(arr)):
            raise ImageError("image contains NaN or Inf samples")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def crop(self, y: int, x: int, h: int, w: int) -> "PlanarImage":
        return PlanarImage(self.data[:, y:y + h, x:x + w])

    def clamped(self) -> "PlanarImage":
        return PlanarImage(np.clip(self.data, 0.0, 1.0))

    @classmethod
    def from_hwc(cls, arr: np.ndarray) -> "PlanarImage":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr)
        return cls(np.moveaxis(arr, -1, 0))

    def to_hwc(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[0].copy()
        return np.moveaxis(self.data, 0, -1).copy()


@dataclass(frozen=True)
class WindowSpec:
    radius: int = 0

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError(f"window radius must be >= 0, got {self.radius}")


Window = Union[WindowSpec, int]


def _radius(w: Window) -> int:
    return w.radius if isinstance(w, WindowSpec) else WindowSpec(int(w)).radius


def ensure_same_shape(a: PlanarImage, b: PlanarImage, ctx: str = "images") -> None:
    if a.shape != b.shape:
        raise ImageError(f"{ctx}: dimension mismatch {a.shape} vs {b.shape}")


def ensure_rgb(img: PlanarImage, ctx: str = "image") -> None:
    if img.channels != 3:
        raise ImageError(f"{ctx}: expected 3 channels, got {img.channels}")


# --- running-sum helpers (2D arrays) ---

def _bounds(n: int, r: int):
    idx = np.arange(n)
    return np.clip(idx - r, 0, n), np.clip(idx + r + 1, 0, n)


def window_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum of a 2D array over clipped (2r+1)x(2r+1) windows, O(1) per pixel."""
    if r == 0:
        return np.array(a, dtype=np.float64)
    h, w = a.shape
    lo, hi = _bounds(h, r)
    cs = np.zeros((h + 1, w))
    np.cumsum(a, axis=0, out=cs[1:])
    rows = cs[hi] - cs[lo]
    lo, hi = _bounds(w, r)
    cs = np.zeros((h, w + 1))
    np.cumsum(rows, axis=1, out=cs[:, 1:])
    return cs[:, hi] - cs[:, lo]


def window_count(h: int, w: int, r: int) -> np.ndarray:
    lo, hi = _bounds(h, r)
    ny = (hi - lo).astype(np.float64)
    lo, hi = _bounds(w, r)
    nx = (hi - lo).astype(np.float64)
    return ny[:, None] * nx[None, :]


def box_mean(a: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return np.array(a, dtype=np.float64)
    return window_sum(a, r) / window_count(a.shape[0], a.shape[1], r)


def box_mean_adjoint(g: np.ndarray, r: int) -> np.ndarray:
    # box_mean is S(x)/n with S symmetric, so its transpose is S(g/n)
    if r == 0:
        return np.array(g, dtype=np.float64)
    return window_sum(g / window_count(g.shape[0], g.shape[1], r), r)


def _extremum2d(a: np.ndarray, r: int, mode: str) -> np.ndarray:
    if r == 0:
        return np.array(a, dtype=np.float64)
    kernel = np.ones((2 * r + 1, 2 * r + 1), np.uint8)
    src = np.ascontiguousarray(a, dtype=np.float64)
    # default border value of erode/dilate never wins the min/max,
    # which is the same as clipping the window
    if mode == "min":
        return cv2.erode(src, kernel)
    return cv2.dilate(src, kernel)


# --- public operations ---

def box_filter(img: PlanarImage, w: Window) -> PlanarImage:
    r = _radius(w)
    return PlanarImage(np.stack([box_mean(p, r) for p in img.data]))


def window_extremum(img: PlanarImage, w: Window, mode: str = "min") -> PlanarImage:
    if mode not in ("min", "max"):
        raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
    r = _radius(w)
    return PlanarImage(np.stack([_extremum2d(p, r, mode) for p in img.data]))


def min_channel(img: PlanarImage) -> PlanarImage:
    ensure_rgb(img, "min_channel")
    return PlanarImage(img.data.min(axis=0, keepdims=True))


def luminance(img: PlanarImage) -> PlanarImage:
    ensure_rgb(img, "luminance")
    wr, wg, wb = LUMA_WEIGHTS
    d = img.data
    return PlanarImage(wr * d[0] + wg * d[1] + wb * d[2])


# --- 8-bit conversion and file I/O ---

def from_uint8(arr: np.ndarray) -> PlanarImage:
    return PlanarImage.from_hwc(np.asarray(arr, dtype=np.float64) / 255.0)


def to_uint8(img: PlanarImage) -> np.ndarray:
    # clamp, then round half away from zero (all values are >= 0 here)
    scaled = np.floor(np.clip(img.to_hwc(), 0.0, 1.0) * 255.0 + 0.5)
    return scaled.astype(np.uint8)


def read_image(path) -> PlanarImage:
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageError(f"cannot read image: {path}")
    if raw.dtype != np.uint8:
        raise ImageError(f"{path}: only 8-bit images are supported, got {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] == 2:
            logger.warning("%s: dropping alpha channel", path.name)
            raw = raw[:, :, 0]
        elif raw.shape[2] == 4:
            logger.warning("%s: dropping alpha channel", path.name)
            raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
        else:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return from_uint8(raw)


def write_image(img: PlanarImage, path) -> None:
    """Write PNG (or PGM/PPM, chosen by suffix) with 8-bit samples."""
    path = Path(path)
    if img.channels not in (1, 3):
        raise ImageError(f"only 1- or 3-channel images can be written, got {img.channels}")
    out = to_uint8(img)
    if img.channels == 3:
        out = cv2.cvtColor(out, cv2.COLOR_RGB2BGR)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise ImageError(f"cannot write image: {path}")
