"""Exception hierarchy shared by all subpackages."""


class CodesignError(Exception):
    """Base class for every error raised by this package."""


class MorphologyError(CodesignError, ValueError):
    pass


class CycleDetected(MorphologyError):
    pass


class DisconnectedPart(MorphologyError):
    pass


class NonPositiveDimension(MorphologyError):
    pass


class BadUnitVector(MorphologyError):
    pass


class LayoutMismatch(MorphologyError):
    pass


class ConfigEmpty(MorphologyError):
    pass


class EmptyFeasibleInterval(MorphologyError):
    pass


class NumericalDivergence(CodesignError, FloatingPointError):
    pass


class ShapeMismatch(CodesignError, ValueError):
    pass


class TapeConsumed(CodesignError, RuntimeError):
    pass


class LengthMismatch(CodesignError, ValueError):
    pass


class NonFiniteLoss(CodesignError, FloatingPointError):
    pass


class PopulationTooSmall(CodesignError, ValueError):
    pass
