# models.py - parameter bundles for the dehazing pipelines, trainer and CLI
# using Python dataclasses to avoid writing __init__ manually
# reference: https://docs.python.org/3/library/dataclasses.html
#
# every section has a validate() that raises ValueError, io_config turns that
# into a ConfigError when the values came from an override file

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

RGB = Tuple[float, float, float]


@dataclass(frozen=True)
class DcpConfig:
    patch_radius: int = 7            # 15x15 patches
    omega: float = 0.95              # haze kept for depth perception
    t_floor: float = 0.1
    bright_fraction: float = 0.001   # top 0.1% of the dark channel picks A
    guide_radius: Optional[int] = None  # None = 4 * patch_radius
    guide_eps: float = 1e-3

    @property
    def effective_guide_radius(self) -> int:
        if self.guide_radius is None:
            return 4 * self.patch_radius
        return self.guide_radius

    def validate(self) -> None:
        if self.patch_radius < 0:
            raise ValueError("dcp.patch_radius must be >= 0")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("dcp.omega must be in (0, 1]")
        if not 0.0 < self.t_floor < 1.0:
            raise ValueError("dcp.t_floor must be in (0, 1)")
        if not 0.0 < self.bright_fraction <= 1.0:
            raise ValueError("dcp.bright_fraction must be in (0, 1]")
        if self.guide_radius is not None and self.guide_radius < 0:
            raise ValueError("dcp.guide_radius must be >= 0")
        if self.guide_eps < 0:
            raise ValueError("dcp.guide_eps must be >= 0")


@dataclass(frozen=True)
class BccrConfig:
    c0: RGB = (0.078, 0.078, 0.078)  # ~20/255
    c1: RGB = (1.0, 1.0, 1.0)
    closing_radius: int = 3
    sigma: float = 0.5
    lambda_data: float = 2.0
    beta0: float = 1.0
    beta_max: float = 256.0
    beta_scale: float = 2.0 * 2.0 ** 0.5
    t_floor: float = 0.05
    # A comes from the dark-channel estimator, shared with dcp
    airlight_radius: int = 7
    bright_fraction: float = 0.001
    inner_iters: int = 1
    solver: str = "fft"              # "fft" (periodic) or "cg" (natural boundary)
    cg_maxiter: int = 500
    cg_tol: float = 1e-6

    def validate(self) -> None:
        if len(self.c0) != 3 or len(self.c1) != 3:
            raise ValueError("bccr.c0 and bccr.c1 need three components")
        if any(lo >= hi for lo, hi in zip(self.c0, self.c1)):
            raise ValueError("bccr.c0 must be < bccr.c1 componentwise")
        if self.closing_radius < 0:
            raise ValueError("bccr.closing_radius must be >= 0")
        if self.sigma <= 0:
            raise ValueError("bccr.sigma must be > 0")
        if self.lambda_data <= 0:
            raise ValueError("bccr.lambda_data must be > 0")
        if not 0.0 < self.beta0 <= self.beta_max:
            raise ValueError("bccr.beta0 must be in (0, beta_max]")
        if self.beta_scale <= 1.0:
            raise ValueError("bccr.beta_scale must be > 1")
        if not 0.0 < self.t_floor < 1.0:
            raise ValueError("bccr.t_floor must be in (0, 1)")
        if not 0.0 < self.bright_fraction <= 1.0:
            raise ValueError("bccr.bright_fraction must be in (0, 1]")
        if self.inner_iters < 1:
            raise ValueError("bccr.inner_iters must be >= 1")
        if self.solver not in ("fft", "cg"):
            raise ValueError(f"bccr.solver must be 'fft' or 'cg', got {self.solver!r}")
        if self.cg_maxiter < 1 or self.cg_tol <= 0:
            raise ValueError("bccr.cg_maxiter must be >= 1 and bccr.cg_tol > 0")


@dataclass(frozen=True)
class FusionConfig:
    d: int = 16                 # feature width of the fusion network
    t_floor: float = 0.1
    smooth_radius: int = 8      # guided filter after the refiner MLP, 0 = off
    smooth_eps: float = 1e-3
    dark_radius: int = 7        # dark channel fed to the refiner
    init_seed: int = 0

    def validate(self) -> None:
        if self.d < 1:
            raise ValueError("fusion.d must be >= 1")
        if not 0.0 < self.t_floor < 1.0:
            raise ValueError("fusion.t_floor must be in (0, 1)")
        if self.smooth_radius < 0 or self.dark_radius < 0:
            raise ValueError("fusion radii must be >= 0")
        if self.smooth_eps < 0:
            raise ValueError("fusion.smooth_eps must be >= 0")


@dataclass(frozen=True)
class LossConfig:
    lambda_ssim: float = 0.2    # structural term, stands in for LPIPS
    lambda_phy: float = 1.0

    def validate(self) -> None:
        if min(self.lambda_ssim, self.lambda_phy) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch: int = 4
    lr: float = 1e-3
    momentum: float = 0.9
    crop: int = 128
    seed: int = 0
    priors: str = "both"        # "both", "dcp" or "bccr" (prior ablation)

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("train.steps must be >= 1")
        if self.batch < 1:
            raise ValueError("train.batch must be >= 1")
        if self.lr < 0:
            raise ValueError("train.lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("train.momentum must be in [0, 1)")
        if self.crop < 1:
            raise ValueError("train.crop must be >= 1")
        if self.priors not in ("both", "dcp", "bccr"):
            raise ValueError(f"train.priors must be both/dcp/bccr, got {self.priors!r}")


@dataclass(frozen=True)
class HazeRanges:
    # ranges sampled by hazesim.make_dataset
    a_lo: float = 0.7
    a_hi: float = 1.0
    t_lo: float = 0.3
    t_hi: float = 0.9
    fields: Tuple[str, ...] = ("smooth", "constant")
    cell: int = 16

    def validate(self) -> None:
        if not 0.0 < self.a_lo <= self.a_hi <= 1.0:
            raise ValueError("A range must satisfy 0 < a_lo <= a_hi <= 1")
        if not 0.0 < self.t_lo <= self.t_hi <= 1.0:
            raise ValueError("t range must satisfy 0 < t_lo <= t_hi <= 1")
        bad = [f for f in self.fields if f not in ("smooth", "constant")]
        if bad or not self.fields:
            raise ValueError(f"unknown transmission field kinds: {bad}")
        if self.cell < 1:
            raise ValueError("cell must be >= 1")


@dataclass(frozen=True)
class Settings:
    # everything an override file can touch, addressed as <section>.<field>
    dcp: DcpConfig = field(default_factory=DcpConfig)
    bccr: BccrConfig = field(default_factory=BccrConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        self.dcp.validate()
        self.bccr.validate()
        self.fusion.validate()
        self.loss.validate()
        self.train.validate()


@dataclass
class RunConfig:
    method: str = "dcp"
    threads: int = 0                 # 0 = use all logical cores
    seed: int = 0
    weights_path: Optional[str] = None
    config_path: Optional[str] = None

    def validate(self) -> None:
        if self.method not in ("dcp", "bccr", "fused"):
            raise ValueError(f"method must be dcp/bccr/fused, got {self.method!r}")
        if self.threads < 0:
            raise ValueError("threads must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
