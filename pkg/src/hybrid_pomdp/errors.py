"""Exception and warning types raised across the package."""


class HybridPlanningError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(HybridPlanningError, ValueError):
    pass


class MissingMode(HybridPlanningError, ValueError):
    pass


class MissingSelfLoop(HybridPlanningError, ValueError):
    pass


class UncoveredDomain(HybridPlanningError, ValueError):
    pass


class OutOfDomain(HybridPlanningError, ValueError):
    pass


class InvalidBelief(HybridPlanningError, ValueError):
    pass


class NumericalFailure(HybridPlanningError, ArithmeticError):
    pass


class DegenerateBelief(NumericalFailure):
    pass


class SingularInnovationCovariance(NumericalFailure):
    pass


class SingularRiccati(NumericalFailure):
    pass


class EmptyGuardRegion(HybridPlanningError):
    pass


class NoFeasiblePlan(HybridPlanningError):
    pass


class ConfigError(HybridPlanningError, ValueError):
    pass


class AllZeroLikelihoodWarning(RuntimeWarning):
    """Every mode likelihood underflowed; the discrete posterior was set to uniform."""
