from __future__ import annotations

from hazeforge.imgcore import PlanarImage
from hazeforge.models import Settings
from hazeforge.priors.bccr import dehaze_bccr
from hazeforge.priors.dcp import dehaze_dcp
from hazeforge.priors.result import PriorResult


def dehaze(img: PlanarImage, method: str = "dcp", settings: Settings | None = None) -> PriorResult:
    settings = settings or Settings()
    method = (method or "").lower()
    if method == "dcp":
        return dehaze_dcp(img, settings.dcp)
    if method == "bccr":
        return dehaze_bccr(img, settings.bccr)
    raise ValueError(f"Unknown dehazing method: {method!r}")
