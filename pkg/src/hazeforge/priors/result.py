from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

from hazeforge.imgcore import PlanarImage

# lower clamp keeps the ASM inversion well-conditioned
A_MIN = 0.05


class DegenerateAtmosphere(ValueError):
    pass


class SolverStall(RuntimeError):
    def __init__(self, message: str, residual: float) -> None:
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Atmosphere:
    rgb: Tuple[float, float, float]

    def __post_init__(self) -> None:
        if len(self.rgb) != 3:
            raise ValueError(f"atmosphere needs three components, got {self.rgb}")
        if any(not 0.0 < v <= 1.0 for v in self.rgb):
            raise ValueError(f"atmosphere components must be in (0, 1], got {self.rgb}")
        object.__setattr__(self, "rgb", tuple(float(v) for v in self.rgb))

    @staticmethod
    def mean(a: "Atmosphere", b: "Atmosphere") -> "Atmosphere":
        return Atmosphere(tuple(0.5 * (x + y) for x, y in zip(a.rgb, b.rgb)))


@dataclass
class PriorResult:
    radiance:     PlanarImage            # J
    transmission: PlanarImage            # t, one channel
    atmosphere:   Atmosphere             # A
    maps:         Dict[str, PlanarImage] = field(default_factory=dict)
    stats:        Dict[str, Any]         = field(default_factory=dict)
