"""Tests for the reconstruction / physical losses and the fusion trainer."""
from pathlib import Path

import numpy as np
import pytest

from hazeforge.fusion import init_weights
from hazeforge.hazesim import HazeParams, synthesize
from hazeforge.imgcore import PlanarImage, write_image
from hazeforge.models import FusionConfig, LossConfig, Settings, TrainConfig
from hazeforge.physloss import l_phy, l_rec, train_fusion, write_loss_trace
from hazeforge.precheck import PrecheckError
from hazeforge.priors.result import Atmosphere

NO_SSIM = LossConfig(lambda_ssim=0.0)


def _px(v: float) -> PlanarImage:
    return PlanarImage(np.full((1, 1, 1), v))


def _pair(h: int, w: int, seed: int = 0):
    # |a - b| >= 0.05 everywhere so the L1 term has no kinks near a
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.2, 0.8, (3, h, w))
    offset = rng.uniform(0.05, 0.15, (3, h, w)) * rng.choice([-1.0, 1.0], (3, h, w))
    return b + offset, b


def _fd(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        out[idx] = (f(plus) - f(minus)) / (2 * h)
    return out


def _toy_hazy_dir(folder: Path, n: int = 8, size: int = 48) -> Path:
    atm = Atmosphere((0.85, 0.85, 0.85))
    for i in range(n):
        rng = np.random.default_rng(i)
        j = rng.uniform(0.1, 0.9, (3, size, size))
        yy, xx = np.mgrid[0:size, 0:size]
        for c in range(3):
            j[c][(yy + xx + i) % 3 == c] = 0.0
            j[c, :6] = 0.85
        hazy, _ = synthesize(PlanarImage(j), HazeParams(atm, "smooth", t_lo=0.3, t_hi=0.9), seed=i)
        write_image(hazy, folder / f"hazy{i}.png")
    return folder


# --- l_rec ---

def test_l_rec_identical_is_zero() -> None:
    a, _ = _pair(16, 16)
    value, grad = l_rec(PlanarImage(a), PlanarImage(a))
    assert value == pytest.approx(0.0, abs=1e-12)


def test_l_rec_constant_offset() -> None:
    _, b = _pair(8, 8)
    value, _ = l_rec(PlanarImage(b + 0.1), PlanarImage(b), NO_SSIM)
    assert value == pytest.approx(0.1)


def test_l_rec_small_image_without_ssim() -> None:
    a, b = _pair(8, 8, seed=1)
    _, grad = l_rec(PlanarImage(a), PlanarImage(b), NO_SSIM)
    fd = _fd(lambda x: l_rec(PlanarImage(x), PlanarImage(b), NO_SSIM)[0], a)
    assert np.linalg.norm(fd - grad) <= 1e-3 * np.linalg.norm(fd)


def test_l_rec_gradient_with_ssim() -> None:
    a, b = _pair(16, 16, seed=2)
    _, grad = l_rec(PlanarImage(a), PlanarImage(b))
    fd = _fd(lambda x: l_rec(PlanarImage(x), PlanarImage(b))[0], a)
    assert np.linalg.norm(fd - grad) <= 1e-3 * np.linalg.norm(fd)


def test_l_rec_shape_mismatch() -> None:
    with pytest.raises(ValueError):
        l_rec(PlanarImage(np.zeros((3, 4, 4))), PlanarImage(np.zeros((1, 4, 4))))


# --- l_phy ---

def test_l_phy_zero_on_exact_synthesis() -> None:
    rng = np.random.default_rng(3)
    j = PlanarImage(rng.uniform(0.0, 1.0, (3, 16, 16)))
    atm = Atmosphere((0.9, 0.8, 0.85))
    hazy, t = synthesize(j, HazeParams(atm, "smooth", cell=4), seed=1)
    value, g_j, g_t = l_phy(hazy, j, t, atm, NO_SSIM)
    assert value == pytest.approx(0.0, abs=1e-12)
    value, _, _ = l_phy(hazy, j, t, atm)
    assert value == pytest.approx(0.0, abs=1e-9)


def test_l_phy_t_one_is_l_rec() -> None:
    a, b = _pair(16, 16, seed=4)
    ones = PlanarImage(np.ones((1, 16, 16)))
    value, _, _ = l_phy(PlanarImage(b), PlanarImage(a), ones, Atmosphere((0.9, 0.9, 0.9)))
    assert value == pytest.approx(l_rec(PlanarImage(b), PlanarImage(a))[0])


def test_l_phy_single_pixel_hand_case() -> None:
    # I_phy = 0.4 * 0.5 + 0.8 * 0.5 = 0.6, |0.6 - 0.5| = 0.1
    value, g_j, g_t = l_phy(_px(0.5), _px(0.4), _px(0.5), [0.8], NO_SSIM)
    assert value == pytest.approx(0.1)
    assert g_j[0, 0, 0] == pytest.approx(0.5)
    assert g_t[0, 0, 0] == pytest.approx(0.4 - 0.8)


def test_l_phy_scaled_by_lambda_phy() -> None:
    value, g_j, _ = l_phy(_px(0.5), _px(0.4), _px(0.5), [0.8], LossConfig(lambda_ssim=0.0, lambda_phy=3.0))
    assert value == pytest.approx(0.3)
    assert g_j[0, 0, 0] == pytest.approx(1.5)


def test_l_phy_gradients_match_finite_differences() -> None:
    rng = np.random.default_rng(5)
    j = rng.uniform(0.1, 0.9, (3, 16, 16))
    t = rng.uniform(0.3, 0.9, (1, 16, 16))
    hazy = PlanarImage(rng.uniform(0.1, 0.9, (3, 16, 16)))
    atm = Atmosphere((0.85, 0.9, 0.95))
    cfg = LossConfig()
    _, g_j, g_t = l_phy(hazy, PlanarImage(j), PlanarImage(t), atm, cfg)
    fd_j = _fd(lambda x: l_phy(hazy, PlanarImage(x), PlanarImage(t), atm, cfg)[0], j)
    fd_t = _fd(lambda x: l_phy(hazy, PlanarImage(j), PlanarImage(x), atm, cfg)[0], t)
    assert np.linalg.norm(fd_j - g_j) <= 1e-3 * np.linalg.norm(fd_j)
    assert np.linalg.norm(fd_t - g_t) <= 1e-3 * np.linalg.norm(fd_t)


def test_l_phy_atmosphere_channel_count() -> None:
    img = PlanarImage(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError, match="component"):
        l_phy(img, img, PlanarImage(np.ones((1, 2, 2))), Atmosphere((0.9, 0.9, 0.9)))


# --- trainer ---

def _small_settings(d: int = 8) -> Settings:
    return Settings(fusion=FusionConfig(d=d))


def test_lr_zero_leaves_weights_unchanged(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path, n=2, size=32)
    weights = init_weights(8, 1)
    out = train_fusion(hazy_dir, weights, TrainConfig(steps=2, batch=1, lr=0.0, crop=24),
                       LossConfig(), _small_settings())
    for name in weights.names():
        assert out.weights.params[name].dtype == np.float32
        np.testing.assert_array_equal(out.weights.params[name], weights.params[name])


def test_same_seed_same_trace(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path, n=3, size=32)
    tcfg = TrainConfig(steps=5, batch=2, lr=1e-2, crop=24, seed=4)
    a = train_fusion(hazy_dir, init_weights(8), tcfg, LossConfig(), _small_settings())
    b = train_fusion(hazy_dir, init_weights(8), tcfg, LossConfig(), _small_settings())
    assert a.losses == b.losses
    assert len(a.losses) == 5


def test_training_reduces_physical_loss(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path)
    tcfg = TrainConfig(steps=200, batch=2, lr=5e-2, momentum=0.9, crop=32, seed=0)
    out = train_fusion(hazy_dir, init_weights(8), tcfg, LossConfig(lambda_ssim=0.0), _small_settings())
    first, last = np.mean(out.losses[:20]), np.mean(out.losses[-20:])
    assert last <= 0.8 * first


def test_single_prior_ablation(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path, n=2, size=32)
    out = train_fusion(hazy_dir, init_weights(8), TrainConfig(steps=2, batch=1, crop=24, priors="dcp"),
                       LossConfig(), _small_settings())
    assert len(out.losses) == 2
    assert np.isfinite(out.losses).all()


def test_empty_dir(tmp_path: Path) -> None:
    with pytest.raises(PrecheckError, match="no hazy images"):
        train_fusion(tmp_path, init_weights(8), TrainConfig(steps=1), LossConfig(), _small_settings())


def test_crop_larger_than_image(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path, n=1, size=32)
    with pytest.raises(PrecheckError, match="crop"):
        train_fusion(hazy_dir, init_weights(8), TrainConfig(steps=1, crop=64), LossConfig(), _small_settings())


def test_crop_below_ssim_window(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path, n=1, size=24)
    with pytest.raises(PrecheckError, match="ssim window"):
        train_fusion(hazy_dir, init_weights(4), TrainConfig(steps=1, batch=1, crop=8),
                     LossConfig(), _small_settings(4))


def test_small_crop_trains_without_ssim(tmp_path: Path) -> None:
    hazy_dir = _toy_hazy_dir(tmp_path, n=1, size=24)
    out = train_fusion(hazy_dir, init_weights(4), TrainConfig(steps=1, batch=1, crop=8),
                       NO_SSIM, _small_settings(4))
    assert len(out.losses) == 1
    assert np.isfinite(out.losses[0])


def test_loss_trace_csv(tmp_path: Path) -> None:
    write_loss_trace([0.5, 0.25], tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text().splitlines() == ["step,value", "0,0.5", "1,0.25"]
