"""Exception hierarchy shared by every module of the package."""


class SparseFTError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(SparseFTError, ValueError):
    pass


class InvalidTarget(SparseFTError, ValueError):
    pass


class NotScalar(SparseFTError, ValueError):
    pass


class NonFiniteEvaluation(SparseFTError, ArithmeticError):
    pass


class InvalidSpec(SparseFTError, ValueError):
    pass


class DimMismatch(SparseFTError, ValueError):
    pass


class ZeroBudget(SparseFTError, ValueError):
    """floor(m * p) is zero: raise p or use a larger model."""


class BudgetExceedsDim(SparseFTError, ValueError):
    pass


class EmptyData(SparseFTError, ValueError):
    pass


class NonPositiveCurvature(SparseFTError, ValueError):
    pass


class TooLarge(SparseFTError, ValueError):
    pass


class StateCorrupt(SparseFTError, RuntimeError):
    pass


class Diverged(SparseFTError, ArithmeticError):
    pass


class NotSymmetric(SparseFTError, ValueError):
    pass


class InvalidFraction(SparseFTError, ValueError):
    pass


class LengthMismatch(SparseFTError, ValueError):
    pass


class TooShort(SparseFTError, ValueError):
    pass


class NoData(SparseFTError, ValueError):
    pass
