# bccr.py - boundary constraint + contextual regularization dehazer
#
# 1. boundary constraint: radiance bounds c0 <= J <= c1 give a per-pixel lower
#    bound on t, made patch-wise with a morphological closing
# 2. contextual regularization: weighted L1 on filter bank responses of t,
#    weights fall off across image edges
# 3. half-quadratic splitting: shrink the auxiliary u_j, then solve the quadratic
#    t-subproblem (FFT with periodic boundary, or CG with natural boundary),
#    beta grows by beta_scale from beta0 to beta_max
#
# based on Meng et al. "Efficient Image Dehazing with Boundary Constraint and
# Contextual Regularization" (ICCV 2013); psf2otf adapted from the MATLAB function

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import cg

from hazeforge.imgcore import PlanarImage, ensure_rgb, luminance, window_extremum
from hazeforge.models import BccrConfig
from hazeforge.priors.dcp import dark_channel, estimate_atmospheric_light, recover_radiance
from hazeforge.priors.result import Atmosphere, DegenerateAtmosphere, PriorResult, SolverStall

logger = logging.getLogger(__name__)

# A within this of c1 makes the second boundary ratio -inf, so it is dropped
_C1_TOL = 1e-6

# 8 neighbours at 45 degree steps
_DIRECTIONS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True, eq=False)
class FilterBank:
    kernels: Tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        ks = tuple(np.array(k, dtype=np.float64, ndmin=2) for k in self.kernels)
        if not ks:
            raise ValueError("filter bank is empty")
        for i, k in enumerate(ks):
            if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
                raise ValueError(f"kernel {i} must be 2D with odd sizes, got {k.shape}")
            if abs(k.sum()) > 1e-12:
                raise ValueError(f"kernel {i} must sum to 0, sums to {k.sum()}")
        object.__setattr__(self, "kernels", ks)

    def __len__(self) -> int:
        return len(self.kernels)

    @classmethod
    def default(cls) -> "FilterBank":
        kernels = []
        for dy, dx in _DIRECTIONS:
            k = np.zeros((3, 3))
            k[1, 1] = -1.0
            k[1 + dy, 1 + dx] = 1.0
            kernels.append(k)
        kernels.append(np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]))
        return cls(tuple(kernels))

    @classmethod
    def single(cls, kernel) -> "FilterBank":
        return cls((np.asarray(kernel, dtype=np.float64),))


@dataclass
class HqsOutcome:
    transmission: PlanarImage
    energies: List[float]   # best E so far: energies[0] is E(t_b), then one per outer iteration
    iterate_energies: List[float] = field(default_factory=list)  # E of each raw iterate, same indexing


# --- boundary constraint ---

def boundary_transmission(img: PlanarImage, atm: Atmosphere, cfg: BccrConfig) -> PlanarImage:
    ensure_rgb(img, "boundary_transmission")
    a = np.asarray(atm.rgb)
    c0 = np.asarray(cfg.c0, dtype=np.float64)
    c1 = np.asarray(cfg.c1, dtype=np.float64)
    if np.any(a <= c0):
        raise DegenerateAtmosphere(f"atmosphere {atm.rgb} is not above c0 {cfg.c0}")
    if np.any(a >= c1 + _C1_TOL):
        raise DegenerateAtmosphere(f"atmosphere {atm.rgb} exceeds c1 {cfg.c1}")

    t_b = np.full(img.shape[1:], -np.inf)
    for c in range(3):
        diff = a[c] - img.data[c]
        ratio = diff / (a[c] - c0[c])
        if abs(a[c] - c1[c]) >= _C1_TOL:
            ratio = np.maximum(ratio, diff / (a[c] - c1[c]))
        t_b = np.maximum(t_b, ratio)
    t_b = PlanarImage(np.clip(t_b, cfg.t_floor, 1.0))

    # closing = max filter then min filter
    closed = window_extremum(window_extremum(t_b, cfg.closing_radius, "max"),
                             cfg.closing_radius, "min")
    return closed


# --- contextual weights ---

def _convolve(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    # replicate border: zero-sum kernels give exactly 0 on flat regions
    return ndimage.convolve(a, k, mode="nearest")


def contextual_weights(img: PlanarImage, bank: FilterBank, sigma: float) -> List[PlanarImage]:
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    g = luminance(img).data[0]
    return [PlanarImage(np.exp(-_convolve(g, k) ** 2 / (2.0 * sigma * sigma)))
            for k in bank.kernels]


# --- linear operators for the t-subproblem ---

def psf2otf(psf: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """FFT of a centred kernel laid out circularly on `shape` (MATLAB psf2otf).

    Taps wrap around, so kernels wider than the image fold onto it.
    """
    h, w = shape
    kh, kw = psf.shape
    ii, jj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    padded = np.zeros(shape)
    np.add.at(padded, ((ii - kh // 2) % h, (jj - kw // 2) % w), psf)
    return np.fft.fft2(padded)


class _PeriodicOps:
    """Circular convolution, subproblem solved exactly in the frequency domain."""

    def __init__(self, bank: FilterBank, weights: Sequence[np.ndarray], shape) -> None:
        self.otfs = [psf2otf(k, shape) for k in bank.kernels]
        self.weights = list(weights)
        self.dtd = sum(np.abs(o) ** 2 for o in self.otfs)

    def responses(self, t: np.ndarray) -> List[np.ndarray]:
        ft = np.fft.fft2(t)
        return [np.real(np.fft.ifft2(o * ft)) for o in self.otfs]

    def solve(self, t_b, us, lam, beta, t0) -> np.ndarray:
        num = lam * np.fft.fft2(t_b)
        for o, u in zip(self.otfs, us):
            num = num + beta * np.conj(o) * np.fft.fft2(u)
        return np.real(np.fft.ifft2(num / (lam + beta * self.dtd)))


class _NaturalOps:
    """Valid-region convolution matrices, subproblem solved by conjugate gradient."""

    def __init__(self, bank: FilterBank, weights: Sequence[np.ndarray], shape,
                 maxiter: int, tol: float) -> None:
        h, w = shape
        self.shape = shape
        self.maxiter = maxiter
        self.tol = tol
        self.mats = []
        self.weights = []
        for k, wmap in zip(bank.kernels, weights):
            kh, kw = k.shape
            # no valid placement when the kernel is bigger than the image: that
            # kernel then contributes no rows and no regularization
            ny, nx = max(h - kh + 1, 0), max(w - kw + 1, 0)
            oy, ox = kh - 1 - kh // 2, kw - 1 - kw // 2
            yy, xx = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
            rows_all, cols_all, vals_all = [], [], []
            for i in range(kh):
                for j in range(kw):
                    if k[i, j] == 0.0:
                        continue
                    src_y = yy + oy - i + kh // 2
                    src_x = xx + ox - j + kw // 2
                    rows_all.append((yy * nx + xx).ravel())
                    cols_all.append((src_y * w + src_x).ravel())
                    vals_all.append(np.full(ny * nx, k[i, j]))
            mat = sparse.coo_matrix(
                (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                shape=(ny * nx, h * w),
            ).tocsr()
            self.mats.append(mat)
            self.weights.append(np.asarray(wmap)[oy:oy + ny, ox:ox + nx].ravel())
        self.dtd = sum((m.T @ m) for m in self.mats).tocsr()
        self.eye = sparse.identity(h * w, format="csr")

    def responses(self, t: np.ndarray) -> List[np.ndarray]:
        flat = t.ravel()
        return [m @ flat for m in self.mats]

    def solve(self, t_b, us, lam, beta, t0) -> np.ndarray:
        lhs = lam * self.eye + beta * self.dtd
        rhs = lam * t_b.ravel()
        for m, u in zip(self.mats, us):
            rhs = rhs + beta * (m.T @ u)
        x, info = cg(lhs, rhs, x0=t0.ravel(), rtol=self.tol, atol=0.0, maxiter=self.maxiter)
        if info != 0:
            residual = float(np.linalg.norm(rhs - lhs @ x) / max(np.linalg.norm(rhs), 1e-300))
            if info < 0 or residual > self.tol:
                raise SolverStall(
                    f"conjugate gradient did not reach {self.tol:g} in {self.maxiter} "
                    f"iterations (relative residual {residual:.3e})",
                    residual,
                )
        return x.reshape(self.shape)


def _make_ops(bank, weights, shape, cfg: BccrConfig):
    if cfg.solver == "cg":
        return _NaturalOps(bank, weights, shape, cfg.cg_maxiter, cfg.cg_tol)
    return _PeriodicOps(bank, weights, shape)


def _energy(ops, t, t_b, lam) -> float:
    data = 0.5 * lam * float(np.sum((t - t_b) ** 2))
    reg = sum(float(np.sum(np.abs(w * r))) for w, r in zip(ops.weights, ops.responses(t)))
    return data + reg


def bccr_energy(t: PlanarImage, t_b: PlanarImage, weights: Sequence[PlanarImage],
                bank: FilterBank, cfg: BccrConfig) -> float:
    """E(t) = lambda/2 ||t - t_b||^2 + sum_j ||W_j o (D_j * t)||_1 under cfg.solver's boundary."""
    ops = _make_ops(bank, [w.data[0] for w in weights], t.shape[1:], cfg)
    return _energy(ops, t.data[0], t_b.data[0], cfg.lambda_data)


def _soft_shrink(x: np.ndarray, thresh: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - thresh, 0.0)


def hqs_optimize(t_b: PlanarImage, weights: Sequence[PlanarImage], bank: FilterBank,
                 cfg: BccrConfig) -> HqsOutcome:
    if len(weights) != len(bank):
        raise ValueError(f"{len(weights)} weight maps for {len(bank)} kernels")
    tb = t_b.data[0]
    lam = cfg.lambda_data
    ops = _make_ops(bank, [w.data[0] for w in weights], tb.shape, cfg)

    t = tb.copy()
    best_t, best_e = t, _energy(ops, t, tb, lam)
    energies = [best_e]
    iterate_energies = [best_e]

    beta = cfg.beta0
    while beta <= cfg.beta_max * (1.0 + 1e-12):
        for _ in range(cfg.inner_iters):
            us = [_soft_shrink(r, w / beta) for r, w in zip(ops.responses(t), ops.weights)]
            t = ops.solve(tb, us, lam, beta, t)
        e = _energy(ops, t, tb, lam)
        # keep the best iterate so the reported objective never goes up
        if e <= best_e:
            best_t, best_e = t, e
        energies.append(best_e)
        iterate_energies.append(e)
        logger.debug("hqs beta=%.3g energy=%.6g (best %.6g)", beta, e, best_e)
        beta *= cfg.beta_scale

    return HqsOutcome(PlanarImage(np.clip(best_t, cfg.t_floor, 1.0)), energies, iterate_energies)


def dehaze_bccr(img: PlanarImage, cfg: BccrConfig = BccrConfig(),
                bank: FilterBank | None = None) -> PriorResult:
    cfg.validate()
    ensure_rgb(img, "dehaze_bccr")
    bank = bank or FilterBank.default()

    # same estimator as dcp, so both priors agree on A when they are fused
    dark = dark_channel(img, cfg.airlight_radius)
    atm = estimate_atmospheric_light(img, dark, cfg.bright_fraction)
    logger.debug("atmospheric light A = (%.3f, %.3f, %.3f)", *atm.rgb)

    t_b = boundary_transmission(img, atm, cfg)
    weights = contextual_weights(img, bank, cfg.sigma)
    outcome = hqs_optimize(t_b, weights, bank, cfg)
    logger.debug("hqs energy %.6g -> %.6g", outcome.energies[0], outcome.energies[-1])

    radiance = recover_radiance(img, outcome.transmission, atm, cfg.t_floor)
    maps = {"t_b": t_b, "t_final": outcome.transmission}
    maps.update({f"w_{j:02d}": w for j, w in enumerate(weights)})
    return PriorResult(
        radiance=radiance,
        transmission=outcome.transmission,
        atmosphere=atm,
        maps=maps,
        stats={"atmosphere": atm.rgb, "energies": outcome.energies,
               "iterate_energies": outcome.iterate_energies},
    )
