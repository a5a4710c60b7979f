# hazesim.py - haze synthesis with the atmospheric scattering model
#   I(x) = J(x) t(x) + A (1 - t(x))
# used to build ground-truthed test sets (hazy image + true t + clear copy)
#
# depth law t = exp(-beta * depth) as in the usual depth-based haze renderers
# (NYU / KITTI style, see gen_kitti.py makehaze)

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from hazeforge.imgcore import PlanarImage, ensure_rgb, read_image, write_image
from hazeforge.models import HazeRanges
from hazeforge.priors.result import Atmosphere

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff")
FIELD_KINDS = ("constant", "depth", "smooth")


@dataclass(frozen=True, eq=False)
class HazeParams:
    atmosphere: Atmosphere
    kind: str = "constant"
    t0: float = 0.5                         # constant
    beta: float = 1.0                       # depth
    depth: Optional[PlanarImage] = None     # depth, normalized to [0, 1]
    t_lo: float = 0.3                       # smooth
    t_hi: float = 0.9
    cell: int = 16

    def validate(self) -> None:
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown transmission field {self.kind!r}")
        if self.kind == "constant" and not 0.0 < self.t0 <= 1.0:
            raise ValueError(f"constant t0 must be in (0, 1], got {self.t0}")
        if self.kind == "depth":
            if self.depth is None:
                raise ValueError("depth field needs a depth map")
            if self.beta < 0:
                raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.kind == "smooth":
            if not 0.0 < self.t_lo <= self.t_hi <= 1.0:
                raise ValueError("smooth field needs 0 < t_lo <= t_hi <= 1")
            if self.cell < 1:
                raise ValueError("cell must be >= 1")

    def describe(self) -> str:
        # one-token field description for the manifest
        if self.kind == "constant":
            return f"constant:t0={self.t0:.6f}"
        if self.kind == "depth":
            return f"depth:beta={self.beta:.6f}"
        return f"smooth:lo={self.t_lo:.6f},hi={self.t_hi:.6f},cell={self.cell}"


def transmission_from_depth(depth: PlanarImage, beta: float) -> PlanarImage:
    if depth.channels != 1:
        raise ValueError("depth map must have one channel")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if depth.data.min() < 0.0 or depth.data.max() > 1.0:
        raise ValueError("depth map must be normalized to [0, 1]")
    return PlanarImage(np.exp(-beta * depth.data))


def smooth_random_field(shape: Tuple[int, int], lo: float, hi: float,
                        rng: np.random.Generator, cell: int = 16) -> np.ndarray:
    """Value noise on a coarse grid, bilinearly upsampled and mapped onto [lo, hi]."""
    h, w = shape
    coarse = rng.random((math.ceil(h / cell) + 1, math.ceil(w / cell) + 1))
    ys, xs = np.meshgrid(np.arange(h) / cell, np.arange(w) / cell, indexing="ij")
    field = ndimage.map_coordinates(coarse, [ys, xs], order=1, mode="nearest")
    span = field.max() - field.min()
    if span <= 0:
        return np.full(shape, 0.5 * (lo + hi))
    return lo + (hi - lo) * (field - field.min()) / span


def transmission_field(params: HazeParams, shape: Tuple[int, int], seed: int = 0) -> PlanarImage:
    params.validate()
    if params.kind == "constant":
        return PlanarImage(np.full(shape, float(params.t0)))
    if params.kind == "depth":
        if params.depth.shape[1:] != tuple(shape):
            raise ValueError(f"depth map is {params.depth.shape[1:]}, image is {tuple(shape)}")
        return transmission_from_depth(params.depth, params.beta)
    rng = np.random.default_rng(seed)
    return PlanarImage(smooth_random_field(shape, params.t_lo, params.t_hi, rng, params.cell))


def synthesize(clear: PlanarImage, params: HazeParams, seed: int = 0) -> Tuple[PlanarImage, PlanarImage]:
    ensure_rgb(clear, "synthesize")
    t = transmission_field(params, (clear.height, clear.width), seed)
    a = np.asarray(params.atmosphere.rgb)[:, None, None]
    hazy = clear.data * t.data + a * (1.0 - t.data)
    return PlanarImage(hazy), t


# --- dataset generation ---

@dataclass(frozen=True)
class ManifestRow:
    name: str
    source: str
    atmosphere: Tuple[float, float, float]
    field: str
    seed: int

    def to_line(self) -> str:
        a = ",".join(f"{v:.6f}" for v in self.atmosphere)
        return f"{self.name}\t{self.source}\t{a}\t{self.field}\t{self.seed}"


MANIFEST_HEADER = "name\tsource\tatmosphere\tfield\tseed"


def list_images(folder) -> List[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"not a directory: {folder}")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _draw_params(rng: np.random.Generator, ranges: HazeRanges) -> HazeParams:
    atm = Atmosphere(tuple(rng.uniform(ranges.a_lo, ranges.a_hi, size=3)))
    kind = ranges.fields[int(rng.integers(len(ranges.fields)))]
    if kind == "constant":
        return HazeParams(atm, "constant", t0=float(rng.uniform(ranges.t_lo, ranges.t_hi)))
    return HazeParams(atm, "smooth", t_lo=ranges.t_lo, t_hi=ranges.t_hi, cell=ranges.cell)


def _make_variants(index: int, path: Path, out_dir: Path, n_variants: int,
                   ranges: HazeRanges, seed: int) -> List[ManifestRow]:
    clear = read_image(path)
    ensure_rgb(clear, path.name)
    # per-image stream, independent of the order workers pick images up
    rng = np.random.default_rng(seed ^ index)
    rows = []
    for k in range(n_variants):
        params = _draw_params(rng, ranges)
        field_seed = int(rng.integers(2**32))
        hazy, t = synthesize(clear, params, field_seed)
        name = f"{path.stem}_v{k}"
        write_image(hazy, out_dir / "hazy" / f"{name}.png")
        write_image(t, out_dir / "trans" / f"{name}.png")
        write_image(clear, out_dir / "clear" / f"{name}.png")
        rows.append(ManifestRow(name, path.name, params.atmosphere.rgb, params.describe(), field_seed))
    return rows


def make_dataset(clear_dir, out_dir, n_variants: int = 1, ranges: HazeRanges = HazeRanges(),
                 seed: int = 0, threads: int = 1) -> List[ManifestRow]:
    """Write hazy/, trans/, clear/ and manifest.tsv under out_dir; return the manifest rows."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    ranges.validate()
    paths = list_images(clear_dir)
    if not paths:
        raise FileNotFoundError(f"no images in {clear_dir}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    workers = max(1, threads or os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_image = pool.map(
            lambda item: _make_variants(item[0], item[1], out_dir, n_variants, ranges, seed),
            enumerate(paths))
        rows = [row for chunk in per_image for row in chunk]

    lines = [MANIFEST_HEADER] + [r.to_line() for r in rows]
    (out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %d hazy images from %d clear images to %s", len(rows), len(paths), out_dir)
    return rows


def read_manifest(path) -> List[ManifestRow]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        name, source, atm, fld, seed = line.split("\t")
        rows.append(ManifestRow(name, source, tuple(float(v) for v in atm.split(",")), fld, int(seed)))
    return rows


def atmosphere_column(atm: Atmosphere | Sequence[float]) -> np.ndarray:
    rgb = atm.rgb if isinstance(atm, Atmosphere) else tuple(atm)
    return np.asarray(rgb, dtype=np.float64)[:, None, None]
