# physloss.py - physical consistency loss and the self-supervised trainer
#
#   I_phy = J_ref * t_ref + A (1 - t_ref)
#   L_phy = lambda_phy * L_rec(I_phy, I),  L_rec = mean|a - b| + lambda_ssim (1 - SSIM)
#
# only real hazy images are needed: the loss asks the fused radiance and the
# refined transmission to re-synthesize the input. the DCP/BCCR outputs are
# constants here, gradients stop at the fusion network.
#
# optimizer: SGD with momentum, v = mu v + g, p = p - lr v

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from hazeforge.fusion import PfmWeights, pfm_backward, pfm_forward
from hazeforge.hazesim import atmosphere_column, list_images
from hazeforge.imgcore import PlanarImage, ensure_same_shape, read_image
from hazeforge.metrics import ssim_with_grad
from hazeforge.models import LossConfig, Settings, TrainConfig
from hazeforge.precheck import ensure_ok, precheck_training
from hazeforge.priors.bccr import dehaze_bccr
from hazeforge.priors.dcp import dehaze_dcp
from hazeforge.priors.result import Atmosphere

logger = logging.getLogger(__name__)


def _l_rec(a: PlanarImage, b: PlanarImage, lambda_ssim: float) -> Tuple[float, np.ndarray]:
    diff = a.data - b.data
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    if lambda_ssim > 0:
        s, g_s = ssim_with_grad(a, b)
        value += lambda_ssim * (1.0 - s)
        grad = grad - lambda_ssim * g_s
    return value, grad


def l_rec(a: PlanarImage, b: PlanarImage, cfg: LossConfig = LossConfig()) -> Tuple[float, np.ndarray]:
    """Reconstruction distance and its exact gradient with respect to a."""
    ensure_same_shape(a, b, "l_rec")
    return _l_rec(a, b, cfg.lambda_ssim)


def l_phy(hazy: PlanarImage, j_ref: PlanarImage, t_ref: PlanarImage,
          atmosphere: Atmosphere | Sequence[float], cfg: LossConfig = LossConfig()
          ) -> Tuple[float, np.ndarray, np.ndarray]:
    """Returns (value, dL/dJ_ref, dL/dt_ref)."""
    ensure_same_shape(hazy, j_ref, "l_phy")
    if t_ref.channels != 1 or t_ref.shape[1:] != hazy.shape[1:]:
        raise ValueError("t_ref must be a single-channel map the size of the image")
    a = atmosphere_column(atmosphere)
    if a.shape[0] != hazy.channels:
        raise ValueError(f"atmosphere has {a.shape[0]} component(s), image has {hazy.channels}")

    j, t = j_ref.data, t_ref.data
    i_phy = PlanarImage(j * t + a * (1.0 - t))
    value, g = _l_rec(i_phy, hazy, cfg.lambda_ssim)
    grad_j = cfg.lambda_phy * g * t
    grad_t = cfg.lambda_phy * np.sum(g * (j - a), axis=0, keepdims=True)
    return cfg.lambda_phy * value, grad_j, grad_t


# --- trainer ---

@dataclass
class TrainOutcome:
    weights: PfmWeights
    losses: List[float]


@dataclass(eq=False)
class _PriorCache:
    hazy: PlanarImage
    j_dcp: PlanarImage
    j_bccr: PlanarImage
    t_dcp: PlanarImage
    t_bccr: PlanarImage
    atmosphere: Atmosphere

    def crop(self, y: int, x: int, size: int):
        return tuple(m.crop(y, x, size, size) for m in
                     (self.hazy, self.j_dcp, self.j_bccr, self.t_dcp, self.t_bccr))


def load_hazy_dir(hazy_dir) -> List[Tuple[str, PlanarImage]]:
    return [(p.name, read_image(p)) for p in list_images(hazy_dir)]


def _priors_for(hazy: PlanarImage, settings: Settings, which: str) -> _PriorCache:
    dcp = dehaze_dcp(hazy, settings.dcp) if which in ("both", "dcp") else None
    bccr = dehaze_bccr(hazy, settings.bccr) if which in ("both", "bccr") else None
    # single-prior ablation feeds the same prior into both branches
    dcp = dcp or bccr
    bccr = bccr or dcp
    atm = dcp.atmosphere if which != "both" else Atmosphere.mean(dcp.atmosphere, bccr.atmosphere)
    return _PriorCache(hazy, dcp.radiance, bccr.radiance, dcp.transmission,
                       bccr.transmission, atm)


def train_fusion(hazy_dir, weights: PfmWeights, tcfg: TrainConfig = TrainConfig(),
                 lcfg: LossConfig = LossConfig(), settings: Settings | None = None,
                 threads: int = 1) -> TrainOutcome:
    """Fit the fusion and refiner parameters on unpaired hazy images with L_phy."""
    settings = settings or Settings()
    tcfg.validate()
    lcfg.validate()
    images = load_hazy_dir(hazy_dir)
    for w in ensure_ok(precheck_training(images, tcfg, lcfg)):
        logger.warning(w)

    workers = max(1, threads or os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        cache = list(pool.map(lambda item: _priors_for(item[1], settings, tcfg.priors), images))
    logger.info("cached priors for %d image(s)", len(cache))

    # float64 master copy; float32 -> float64 -> float32 is exact, so lr=0 is a no-op
    params = {k: v.astype(np.float64) for k, v in weights.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(tcfg.seed)
    losses = []

    for step in range(tcfg.steps):
        current = PfmWeights(weights.d, params)
        picks = rng.integers(len(cache), size=tcfg.batch)
        total = {k: np.zeros_like(v) for k, v in params.items()}
        step_loss = 0.0
        for idx in picks:
            item = cache[int(idx)]
            y = int(rng.integers(item.hazy.height - tcfg.crop + 1))
            x = int(rng.integers(item.hazy.width - tcfg.crop + 1))
            hazy, j_d, j_b, t_d, t_b = item.crop(y, x, tcfg.crop)
            out, fwd = pfm_forward(j_d, j_b, hazy, t_d, t_b, current, settings.fusion)
            value, g_j, g_t = l_phy(hazy, out.fused, out.t_ref, item.atmosphere, lcfg)
            grads = pfm_backward(fwd, g_j, g_t)
            for k in total:
                total[k] += grads[k]
            step_loss += value

        for k in params:
            velocity[k] = tcfg.momentum * velocity[k] + total[k] / tcfg.batch
            params[k] = params[k] - tcfg.lr * velocity[k]
        losses.append(step_loss / tcfg.batch)
        if step % 50 == 0 or step == tcfg.steps - 1:
            logger.info("step %d/%d  L_phy %.6f", step + 1, tcfg.steps, losses[-1])

    trained = PfmWeights(weights.d, {k: v.astype(np.float32) for k, v in params.items()})
    return TrainOutcome(weights=trained, losses=losses)


def write_loss_trace(losses: Sequence[float], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,value"] + [f"{i},{v:.9g}" for i, v in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
