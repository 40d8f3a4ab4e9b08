from functools import cached_property
from typing import Dict, List, Optional

from structlog import get_logger

from .models import DesignKey, FitResult, LodoFit, NetworkDataset

logger = get_logger()

UPPER = 'upper'
LOWER = 'lower'


#############################################
# The Client API

class UnknownMeasureError(Exception):
    pass


def compute(name: str, ctx: 'DesignContext') -> Optional[float]:
    """
    :param name: a registered measure name ('psi', 'mdffits', 'phi', 'xi', 'w').
    :param ctx: the design being evaluated, with its fits.
    :return: the statistic, or None when it is undefined for this design.
    """
    return measure_for_name(name).compute(ctx)


class DesignContext(object):
    """
    Everything the measures need about one design of one network. Fits are computed on first use
    and shared between measures.
    """

    def __init__(self, net: NetworkDataset, design: DesignKey, full: FitResult, replicate: bool = False):
        self.net = net
        self.design = design
        self.full = full
        # Inside bootstrap replicates, zero heterogeneity denominators follow the limit convention.
        self.replicate = replicate

    @cached_property
    def lodo(self) -> LodoFit:
        from .actions.influence import lodo_fit
        return lodo_fit(self.net, self.design)

    @cached_property
    def subset(self) -> FitResult:
        from .actions.inconsistency import subset_fit
        return subset_fit(self.net, self.design)


#############################################
# The SPI

class Measure:
    """ Each influence statistic implements this. """

    #: registry key
    name = ''
    #: bootstrap tail: UPPER counts replicates >= realized, LOWER counts replicates <= realized
    tail = UPPER
    #: ranking of realized values: True ranks large values first
    descending = True

    def compute(self, ctx: DesignContext) -> Optional[float]:
        """
        :param ctx: the design context
        :return: the realized statistic, None when undefined
        """
        pass


#############################################
# The registry

def register(measure: Measure) -> None:
    _registry[measure.name] = measure


def unregister(measure: Measure) -> None:
    del _registry[measure.name]


def measure_for_name(name: str) -> Measure:
    measure = _registry.get(name, None)
    if not measure:
        raise UnknownMeasureError("No measure registered with name '{}'".format(name))
    return measure


def registered_names() -> List[str]:
    return list(_registry)


_registry: Dict[str, Measure] = {}
