"""Exception hierarchy shared by every module."""


class RankOneError(Exception):
    """Base class for all errors raised by :mod:`rankone`."""


class ParameterError(RankOneError, ValueError):
    """An argument or configuration value is outside its valid range."""


class StageDepthError(RankOneError):
    """Stage construction overflowed the floating point range."""

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"stage {stage} is not representable in double precision")


class DepthExhausted(RankOneError):
    """The built hierarchy is too shallow for the requested motion.

    ``max_safe_time`` is the largest ``|t|`` known to be feasible for the
    object that failed (``0.0`` when nothing is known).
    """

    def __init__(self, message, max_safe_time=0.0):
        self.max_safe_time = max_safe_time
        super().__init__(message)


class DegenerateDictionary(RankOneError):
    """The operator dictionary of a weak-limit fit has a singular Gram matrix."""


class BasisDegeneracy(RankOneError):
    """Centered test functions are (numerically) linearly dependent."""

    def __init__(self, message, condition_number):
        self.condition_number = condition_number
        super().__init__(message)


class DegenerateInput(RankOneError, ValueError):
    """A spectral estimate carries no mass."""
