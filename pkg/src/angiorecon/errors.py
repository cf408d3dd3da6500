"""Exception hierarchy shared by all stages."""


class ReconstructionError(Exception):
    """Base class for every error raised by angiorecon."""


class InvalidInputError(ReconstructionError, ValueError):
    """Input violates a documented precondition."""


class DegenerateProjectionError(ReconstructionError):
    pass


class IllConditionedError(ReconstructionError):
    pass


class NoPathError(ReconstructionError):
    """Centerline endpoints are not connected through the foreground."""


class NumericalError(ReconstructionError, FloatingPointError):
    """NaN/Inf encountered or an iterative method failed."""
