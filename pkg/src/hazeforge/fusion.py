# fusion.py - perceptual fusion model (PFM) and transmission refiner
#
# everything is per-pixel (point-wise layers), so an image is handled as an
# (N, channels) matrix and each layer is a matmul. gradients are written out
# by hand (no autograd), checked against finite differences in the tests.
#
# forward, per pixel unless noted:
#   1. features:   F_x = mlp(relu(embed(x)))  for x in J_dcp, J_bccr, I
#   2. F_dcp += F_I, F_bccr += F_I
#   3. guidance:   G = F + F * sigmoid(fc2(relu(fc1(F))))
#   4. global:     w = softmax(mlp(mean over pixels of [G_dcp, G_bccr]))
#                  K = C * w (broadcast per half) + C
#   5. gate:       g = softmax(gate(K));  J_fuse = g1 J_dcp + g2 J_bccr
#   6. refiner:    t_ref = clamp(guided(sigmoid(mlp([t_dcp, t_bccr, I, dark(I)]))))
#
# gated fusion idea from Chen et al. "Gated Context Aggregation Network"
# manual backprop pattern: dL/dW = dL/dy^T @ x, dL/dx = dL/dy @ W

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from hazeforge.imgcore import PlanarImage, ensure_rgb, ensure_same_shape, luminance
from hazeforge.models import FusionConfig, Settings
from hazeforge.priors.dcp import _guided2d, _guided2d_adjoint, dark_channel, dehaze_dcp
from hazeforge.priors.bccr import dehaze_bccr
from hazeforge.priors.result import Atmosphere, PriorResult

logger = logging.getLogger(__name__)

MAGIC = b"PFMW"
VERSION = 1

BRANCHES = ("dcp", "bccr", "hazy")
GUIDED = ("dcp", "bccr")
REFINER_INPUTS = 6   # t_dcp, t_bccr, I_r, I_g, I_b, dark(I)


class WeightsFormatError(ValueError):
    pass


class WeightsShapeError(WeightsFormatError):
    pass


def layer_specs(d: int) -> List[Tuple[str, int, int]]:
    """(layer name, out, in) in the fixed file order."""
    layers = []
    for b in BRANCHES:
        layers += [(f"{b}.embed", d, 3), (f"{b}.mlp1", d, d), (f"{b}.mlp2", d, d)]
    for k in GUIDED:
        layers += [(f"guide.{k}.fc1", d, d), (f"guide.{k}.fc2", d, d)]
    layers += [
        ("pool.fc1", d, 2 * d),
        ("pool.fc2", 2, d),
        ("gate", 2, 2 * d),
        ("refine.fc1", d, REFINER_INPUTS),
        ("refine.fc2", 1, d),
    ]
    return layers


def param_specs(d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    specs = []
    for name, n_out, n_in in layer_specs(d):
        specs.append((f"{name}.w", (n_out, n_in)))
        specs.append((f"{name}.b", (n_out,)))
    return specs


@dataclass(eq=False)
class PfmWeights:
    d: int
    params: Dict[str, np.ndarray]

    def __post_init__(self) -> None:
        specs = param_specs(self.d)
        missing = [n for n, _ in specs if n not in self.params]
        extra = sorted(set(self.params) - {n for n, _ in specs})
        if missing or extra:
            raise WeightsShapeError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, shape in specs:
            arr = self.params[name]
            if arr.shape != shape:
                raise WeightsShapeError(f"{name}: expected shape {shape} for d={self.d}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite parameters")

    def names(self) -> List[str]:
        return [n for n, _ in param_specs(self.d)]

    def astype(self, dtype) -> "PfmWeights":
        return PfmWeights(self.d, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "PfmWeights":
        return PfmWeights(self.d, {k: v.copy() for k, v in self.params.items()})


def init_weights(d: int = 16, seed: int = 0) -> PfmWeights:
    """Linear maps ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_specs(d):
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return PfmWeights(d, params)


@dataclass
class FusionOutput:
    fused: PlanarImage                    # J_fuse
    t_ref: PlanarImage
    gates: PlanarImage                    # (g1, g2) per pixel
    global_weights: Tuple[float, float]   # (w1, w2)


@dataclass(eq=False)
class ForwardCache:
    d: int
    shape: Tuple[int, int]
    cfg: FusionConfig
    params: Dict[str, np.ndarray]
    acts: Dict[str, np.ndarray] = field(default_factory=dict)
    guide: Optional[np.ndarray] = None


# --- small helpers ---

def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def _as_rows(img: PlanarImage) -> np.ndarray:
    return img.data.reshape(img.channels, -1).T


def _dense(p, name, x):
    return x @ p[f"{name}.w"].T + p[f"{name}.b"]


def _dense_backward(p, grads, name, x, dy):
    grads[f"{name}.w"] += dy.T @ x
    grads[f"{name}.b"] += dy.sum(axis=0)
    return dy @ p[f"{name}.w"]


# --- forward ---

def pfm_forward(j_dcp: PlanarImage, j_bccr: PlanarImage, hazy: PlanarImage,
                t_dcp: PlanarImage, t_bccr: PlanarImage, weights: PfmWeights,
                cfg: FusionConfig = FusionConfig()) -> Tuple[FusionOutput, ForwardCache]:
    for img, ctx in ((j_dcp, "J_dcp"), (j_bccr, "J_bccr"), (hazy, "I")):
        ensure_rgb(img, ctx)
    ensure_same_shape(j_dcp, hazy, "J_dcp vs I")
    ensure_same_shape(j_bccr, hazy, "J_bccr vs I")
    for t, ctx in ((t_dcp, "t_dcp"), (t_bccr, "t_bccr")):
        if t.channels != 1 or t.shape[1:] != hazy.shape[1:]:
            raise ValueError(f"{ctx}: expected a single-channel map of size {hazy.shape[1:]}")

    d = weights.d
    h, w = hazy.height, hazy.width
    p = {k: v.astype(np.float64) for k, v in weights.params.items()}
    cache = ForwardCache(d=d, shape=(h, w), cfg=cfg, params=p)
    a = cache.acts

    # 1-2. per-branch features, hazy features added to both priors
    feats = {}
    for b, img in zip(BRANCHES, (j_dcp, j_bccr, hazy)):
        x = _as_rows(img)
        z1 = _dense(p, f"{b}.embed", x)
        e = _relu(z1)
        z2 = _dense(p, f"{b}.mlp1", e)
        hid = _relu(z2)
        feats[b] = _dense(p, f"{b}.mlp2", hid)
        a.update({f"{b}.x": x, f"{b}.z1": z1, f"{b}.e": e, f"{b}.z2": z2, f"{b}.h": hid})

    # 3. residual sigmoid guidance per prior branch
    guided = []
    for k in GUIDED:
        f = feats[k] + feats["hazy"]
        q1 = _dense(p, f"guide.{k}.fc1", f)
        r = _relu(q1)
        s = expit(_dense(p, f"guide.{k}.fc2", r))
        guided.append(f * (1.0 + s))
        a.update({f"guide.{k}.f": f, f"guide.{k}.q1": q1, f"guide.{k}.r": r, f"guide.{k}.s": s})

    # 4. global re-weighting from pooled features
    concat = np.concatenate(guided, axis=1)
    pooled = concat.mean(axis=0)
    y1 = p["pool.fc1.w"] @ pooled + p["pool.fc1.b"]
    y = _relu(y1)
    logits = p["pool.fc2.w"] @ y + p["pool.fc2.b"]
    wg = _softmax(logits)
    omega = np.repeat(wg, d)
    coarse = concat * (1.0 + omega)
    a.update({"concat": concat, "pooled": pooled, "y1": y1, "y": y, "wg": wg,
              "omega": omega, "coarse": coarse})

    # 5. per-pixel gated fusion; written as J_bccr + g1 (J_dcp - J_bccr) so equal
    # inputs come back bit-exact
    gates = _softmax(_dense(p, "gate", coarse), axis=1)
    jd, jb = _as_rows(j_dcp), _as_rows(j_bccr)
    diff = jd - jb
    fused = jb + gates[:, :1] * diff
    a.update({"gates": gates, "diff": diff})

    # 6. transmission refiner
    hazy_rows = _as_rows(hazy)
    dark = dark_channel(hazy, cfg.dark_radius).data.reshape(-1, 1)
    rin = np.concatenate([_as_rows(t_dcp), _as_rows(t_bccr), hazy_rows, dark], axis=1)
    a1 = _dense(p, "refine.fc1", rin)
    r1 = _relu(a1)
    sraw = expit(_dense(p, "refine.fc2", r1))[:, 0]
    if cfg.smooth_radius > 0:
        cache.guide = luminance(hazy).data[0]
        smooth = _guided2d(sraw.reshape(h, w), cache.guide, cfg.smooth_radius,
                           cfg.smooth_eps).ravel()
    else:
        smooth = sraw
    t_ref = np.clip(smooth, cfg.t_floor, 1.0)
    a.update({"rin": rin, "a1": a1, "r1": r1, "sraw": sraw, "smooth": smooth})

    out = FusionOutput(
        fused=PlanarImage(fused.T.reshape(3, h, w)),
        t_ref=PlanarImage(t_ref.reshape(1, h, w)),
        gates=PlanarImage(gates.T.reshape(2, h, w)),
        global_weights=(float(wg[0]), float(wg[1])),
    )
    logger.debug("pfm forward %dx%d: w=(%.3f, %.3f) mean g1=%.3f", w, h, wg[0], wg[1],
                 gates[:, 0].mean())
    return out, cache


# --- backward ---

def pfm_backward(cache: ForwardCache, grad_fused, grad_t_ref) -> Dict[str, np.ndarray]:
    """Exact gradients of every parameter for upstream dL/dJ_fuse and dL/dt_ref."""
    p, a, d = cache.params, cache.acts, cache.d
    h, w = cache.shape
    n = h * w
    g_j = np.asarray(getattr(grad_fused, "data", grad_fused), dtype=np.float64).reshape(3, n).T
    g_t = np.asarray(getattr(grad_t_ref, "data", grad_t_ref), dtype=np.float64).reshape(n)
    grads = {name: np.zeros(shape) for name, shape in param_specs(d)}

    # gate softmax; dJ/dg1 = J_dcp - J_bccr and g2 does not appear
    gates = a["gates"]
    g_gates = np.zeros_like(gates)
    g_gates[:, 0] = np.sum(g_j * a["diff"], axis=1)
    g_logits = gates * (g_gates - np.sum(gates * g_gates, axis=1, keepdims=True))
    g_coarse = _dense_backward(p, grads, "gate", a["coarse"], g_logits)

    # coarse = concat * (1 + omega)
    concat, omega = a["concat"], a["omega"]
    g_concat = g_coarse * (1.0 + omega)
    g_omega = np.sum(g_coarse * concat, axis=0)
    wg = a["wg"]
    g_wg = np.array([g_omega[:d].sum(), g_omega[d:].sum()])
    g_logit = wg * (g_wg - np.dot(wg, g_wg))

    grads["pool.fc2.w"] += np.outer(g_logit, a["y"])
    grads["pool.fc2.b"] += g_logit
    g_y1 = (p["pool.fc2.w"].T @ g_logit) * (a["y1"] > 0)
    grads["pool.fc1.w"] += np.outer(g_y1, a["pooled"])
    grads["pool.fc1.b"] += g_y1
    g_concat += (p["pool.fc1.w"].T @ g_y1) / n

    # guidance blocks
    g_feats = {b: np.zeros((n, d)) for b in BRANCHES}
    for i, k in enumerate(GUIDED):
        g_guided = g_concat[:, i * d:(i + 1) * d]
        f, s = a[f"guide.{k}.f"], a[f"guide.{k}.s"]
        g_f = g_guided * (1.0 + s)
        g_q2 = g_guided * f * s * (1.0 - s)
        g_r = _dense_backward(p, grads, f"guide.{k}.fc2", a[f"guide.{k}.r"], g_q2)
        g_q1 = g_r * (a[f"guide.{k}.q1"] > 0)
        g_f += _dense_backward(p, grads, f"guide.{k}.fc1", f, g_q1)
        g_feats[k] += g_f
        g_feats["hazy"] += g_f

    # feature extractors
    for b in BRANCHES:
        g_h = _dense_backward(p, grads, f"{b}.mlp2", a[f"{b}.h"], g_feats[b])
        g_z2 = g_h * (a[f"{b}.z2"] > 0)
        g_e = _dense_backward(p, grads, f"{b}.mlp1", a[f"{b}.e"], g_z2)
        g_z1 = g_e * (a[f"{b}.z1"] > 0)
        _dense_backward(p, grads, f"{b}.embed", a[f"{b}.x"], g_z1)

    # refiner: clamp, guided smoothing, sigmoid, mlp
    cfg = cache.cfg
    smooth = a["smooth"]
    g_smooth = g_t * ((smooth > cfg.t_floor) & (smooth < 1.0))
    if cfg.smooth_radius > 0:
        g_sraw = _guided2d_adjoint(g_smooth.reshape(h, w), cache.guide, cfg.smooth_radius,
                                   cfg.smooth_eps).ravel()
    else:
        g_sraw = g_smooth
    sraw = a["sraw"]
    g_a2 = (g_sraw * sraw * (1.0 - sraw))[:, None]
    g_r1 = _dense_backward(p, grads, "refine.fc2", a["r1"], g_a2)
    g_a1 = g_r1 * (a["a1"] > 0)
    _dense_backward(p, grads, "refine.fc1", a["rin"], g_a1)
    return grads


# --- end-to-end helper ---

def dehaze_fused(hazy: PlanarImage, weights: PfmWeights, settings: Settings | None = None,
                 refine: Optional[Callable[[PlanarImage], PlanarImage]] = None,
                 ) -> Tuple[PriorResult, FusionOutput]:
    """Run both priors, fuse them, and hand J_fuse to an optional J refiner.

    `refine` stands in for a learned restoration backbone; without one J_ref = J_fuse.
    """
    settings = settings or Settings()
    dcp = dehaze_dcp(hazy, settings.dcp)
    bccr = dehaze_bccr(hazy, settings.bccr)
    out, _ = pfm_forward(dcp.radiance, bccr.radiance, hazy, dcp.transmission,
                         bccr.transmission, weights, settings.fusion)
    j_ref = refine(out.fused) if refine is not None else out.fused
    result = PriorResult(
        radiance=j_ref,
        transmission=out.t_ref,
        atmosphere=Atmosphere.mean(dcp.atmosphere, bccr.atmosphere),
        maps={
            "t_dcp": dcp.transmission,
            "t_bccr": bccr.transmission,
            "t_ref": out.t_ref,
            "gate_dcp": PlanarImage(out.gates.data[:1]),
        },
        stats={"global_weights": out.global_weights},
    )
    return result, out


# --- weight files ---
# little-endian: "PFMW", u32 version, u32 d, then per parameter in param_specs
# order: u32 rank, rank x u32 dims, float32 payload

def save_weights(weights: PfmWeights, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, weights.d)]
    for name, shape in param_specs(weights.d):
        arr = np.ascontiguousarray(weights.params[name], dtype="<f4")
        chunks.append(struct.pack("<I", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path) -> None:
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise WeightsFormatError(f"{self.path}: truncated file while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str, count: int = 1):
        return struct.unpack(f"<{count}I", self.take(4 * count, what))


def load_weights(path) -> PfmWeights:
    blob = Path(path).read_bytes()
    rd = _Reader(blob, path)
    if rd.take(4, "magic") != MAGIC:
        raise WeightsFormatError(f"{path}: not a PFMW weight file (bad magic)")
    version, d = rd.u32("header", 2)
    if version != VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    if d < 1:
        raise WeightsFormatError(f"{path}: invalid feature width d={d}")

    params = {}
    for name, shape in param_specs(d):
        (rank,) = rd.u32(f"{name} rank")
        dims = rd.u32(f"{name} dims", rank) if rank else ()
        if tuple(dims) != shape:
            raise WeightsShapeError(
                f"{path}: {name} has shape {tuple(dims)}, header d={d} requires {shape}")
        count = int(np.prod(shape))
        raw = rd.take(4 * count, name)
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if rd.pos != len(blob):
        raise WeightsFormatError(f"{path}: {len(blob) - rd.pos} trailing bytes")
    return PfmWeights(d, params)
