"""Exception and warning types raised across the package."""


class VolHawkesError(Exception):
    """Base class for all package errors."""


class StructuralError(VolHawkesError, ValueError):
    """Inputs have mismatched dimensions or missing components."""


class DomainError(VolHawkesError, ValueError):
    """A parameter lies outside its admissible range."""


class InsufficientDataError(DomainError):
    pass


class InstabilityError(VolHawkesError):
    """The branching matrix has spectral radius >= 1."""


class UnsupportedKernelError(VolHawkesError):
    """The kernel cannot be simulated by thinning (negative or non-monotone)."""


class NumericalError(VolHawkesError):
    pass


class DegeneracyError(VolHawkesError):
    """A limit matrix is singular or a construction is ill-posed."""


class StrategyError(VolHawkesError):
    """A quoting strategy returned an unusable spread.

    ``partial`` holds whatever was simulated before the failure.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(VolHawkesError, ValueError):
    """Experiment configuration failed validation."""


class SupercriticalWarning(RuntimeWarning):
    """Simulating a kernel whose branching matrix has spectral radius >= 1."""


class StabilityWarning(RuntimeWarning):
    pass


class LimitNotConvergedWarning(RuntimeWarning):
    pass
