"""Tests for haze synthesis and dataset generation."""
import math
from pathlib import Path

import numpy as np
import pytest

from hazeforge.hazesim import (
    HazeParams, make_dataset, read_manifest, smooth_random_field, synthesize,
    transmission_field, transmission_from_depth,
)
from hazeforge.imgcore import PlanarImage, from_uint8, read_image, write_image
from hazeforge.models import HazeRanges
from hazeforge.priors.dcp import recover_radiance
from hazeforge.priors.result import Atmosphere

GREY = Atmosphere((0.9, 0.9, 0.9))


def _clear(h: int = 16, w: int = 20, seed: int = 0) -> PlanarImage:
    return PlanarImage(np.random.default_rng(seed).uniform(0.0, 1.0, (3, h, w)))


def _write_clear_dir(folder: Path, n: int = 3) -> Path:
    rng = np.random.default_rng(42)
    for i in range(n):
        raw = rng.integers(0, 256, size=(24, 32, 3), dtype=np.uint8)
        write_image(from_uint8(raw), folder / f"scene{i}.png")
    return folder


# --- synthesize ---

def test_t_one_returns_clear_image() -> None:
    j = _clear()
    hazy, t = synthesize(j, HazeParams(GREY, "constant", t0=1.0))
    np.testing.assert_array_equal(hazy.data, j.data)
    np.testing.assert_array_equal(t.data, 1.0)


def test_tiny_t_is_close_to_atmosphere() -> None:
    hazy, _ = synthesize(_clear(), HazeParams(GREY, "constant", t0=0.01))
    assert np.abs(hazy.data - 0.9).max() <= 0.01 + 1e-12


def test_hand_example() -> None:
    j = PlanarImage(np.array([0.4, 0.6, 0.2])[:, None, None])
    hazy, _ = synthesize(j, HazeParams(GREY, "constant", t0=0.5))
    np.testing.assert_allclose(hazy.data[:, 0, 0], (0.65, 0.75, 0.55))


def test_hazy_is_convex_combination() -> None:
    j = _clear(seed=1)
    hazy, t = synthesize(j, HazeParams(Atmosphere((0.8, 0.85, 0.95)), "smooth"), seed=3)
    a = np.array([0.8, 0.85, 0.95])[:, None, None]
    lo, hi = np.minimum(j.data, a), np.maximum(j.data, a)
    assert np.all(hazy.data >= lo - 1e-12) and np.all(hazy.data <= hi + 1e-12)
    assert t.data.min() > 0 and t.data.max() <= 1


def test_zero_t0_rejected() -> None:
    with pytest.raises(ValueError, match="t0"):
        synthesize(_clear(), HazeParams(GREY, "constant", t0=0.0))


def test_asm_roundtrip_with_true_parameters() -> None:
    for seed in range(10):
        j = _clear(24, 24, seed=seed)
        atm = Atmosphere(tuple(np.random.default_rng(seed).uniform(0.7, 1.0, 3)))
        hazy, t = synthesize(j, HazeParams(atm, "smooth", t_lo=0.3, t_hi=0.9), seed=seed)
        back = recover_radiance(hazy, t, atm, 0.1, clamp=False)
        assert np.abs(back.data - j.data).max() <= 1e-6


def test_airlight_image_recovers_airlight() -> None:
    a = (0.8, 0.85, 0.9)
    hazy = PlanarImage(np.broadcast_to(np.array(a)[:, None, None], (3, 5, 5)))
    t = PlanarImage(np.random.default_rng(0).uniform(0.2, 1.0, (1, 5, 5)))
    back = recover_radiance(hazy, t, Atmosphere(a), 0.1, clamp=False)
    np.testing.assert_array_equal(back.data, hazy.data)


# --- transmission fields ---

def test_depth_law() -> None:
    depth = PlanarImage(np.linspace(0.0, 1.0, 12).reshape(3, 4))
    np.testing.assert_array_equal(transmission_from_depth(depth, 0.0).data, 1.0)
    assert transmission_from_depth(PlanarImage(np.ones((1, 1))), math.log(2)).data[0, 0, 0] == pytest.approx(0.5)
    t = transmission_from_depth(depth, 1.3).data.ravel()
    assert np.all(np.diff(t) <= 0)


def test_depth_validation() -> None:
    with pytest.raises(ValueError, match="beta"):
        transmission_from_depth(PlanarImage(np.zeros((2, 2))), -1.0)
    with pytest.raises(ValueError, match="normalized"):
        transmission_from_depth(PlanarImage(np.full((2, 2), 2.0)), 1.0)


def test_depth_field_in_synthesis() -> None:
    depth = PlanarImage(np.tile(np.linspace(0, 1, 20), (16, 1)))
    params = HazeParams(GREY, "depth", beta=1.0, depth=depth)
    t = transmission_field(params, (16, 20))
    np.testing.assert_allclose(t.data[0, 0], np.exp(-np.linspace(0, 1, 20)))


def test_smooth_field_range_and_seed() -> None:
    f1 = smooth_random_field((40, 50), 0.3, 0.9, np.random.default_rng(5))
    f2 = smooth_random_field((40, 50), 0.3, 0.9, np.random.default_rng(5))
    np.testing.assert_array_equal(f1, f2)
    assert f1.min() == pytest.approx(0.3) and f1.max() == pytest.approx(0.9)


# --- dataset ---

def test_make_dataset_counts(tmp_path: Path) -> None:
    clear = _write_clear_dir(tmp_path / "clear_in")
    rows = make_dataset(clear, tmp_path / "out", n_variants=2, seed=1)
    assert len(rows) == 6
    for sub in ("hazy", "trans", "clear"):
        assert len(list((tmp_path / "out" / sub).glob("*.png"))) == 6
    back = read_manifest(tmp_path / "out" / "manifest.tsv")
    assert [(r.name, r.field, r.seed) for r in back] == [(r.name, r.field, r.seed) for r in rows]
    assert back[0].atmosphere == pytest.approx(rows[0].atmosphere, abs=1e-6)
    t = read_image(tmp_path / "out" / "trans" / f"{rows[0].name}.png")
    assert t.channels == 1


def test_make_dataset_atmosphere_in_range(tmp_path: Path) -> None:
    clear = _write_clear_dir(tmp_path / "clear_in")
    ranges = HazeRanges(a_lo=0.75, a_hi=0.8)
    rows = make_dataset(clear, tmp_path / "out", n_variants=3, ranges=ranges, seed=2)
    for row in rows:
        assert all(0.75 <= a <= 0.8 for a in row.atmosphere)


def test_make_dataset_reproducible_across_threads(tmp_path: Path) -> None:
    clear = _write_clear_dir(tmp_path / "clear_in")
    make_dataset(clear, tmp_path / "a", n_variants=2, seed=9, threads=1)
    make_dataset(clear, tmp_path / "b", n_variants=2, seed=9, threads=3)
    assert (tmp_path / "a" / "manifest.tsv").read_bytes() == (tmp_path / "b" / "manifest.tsv").read_bytes()
    for f in sorted((tmp_path / "a" / "hazy").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "hazy" / f.name).read_bytes()


def test_make_dataset_missing_dir(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        make_dataset(tmp_path / "missing", tmp_path / "out")
