from hazeforge.priors.api import dehaze as dehaze
from hazeforge.priors.result import Atmosphere as Atmosphere
from hazeforge.priors.result import PriorResult as PriorResult
