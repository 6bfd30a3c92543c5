"""Exception hierarchy shared by all gpff modules."""


class GpffError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GpffError):
    """Malformed or unknown configuration content."""


class DomainError(GpffError, ValueError):
    """A position lies outside the plant's valid domain."""


class StabilityError(GpffError):
    """A closed loop has poles on or outside the unit circle.

    ``pole_magnitudes`` holds the magnitudes of all closed-loop poles.
    """

    def __init__(self, message, pole_magnitudes=()):
        super().__init__(message)
        self.pole_magnitudes = tuple(float(p) for p in pole_magnitudes)


class NumericalError(GpffError):
    """Generic numerical failure (singular systems, non-convergence)."""


class ConditioningError(NumericalError):
    """A covariance matrix could not be factorized, even with jitter."""

    def __init__(self, message, condition_estimate=float("nan")):
        super().__init__(message)
        self.condition_estimate = float(condition_estimate)


class SingularUpdateError(NumericalError):
    """The ILC Hessian R is singular; increase the effort weight w_f."""


class TrajectoryError(GpffError, ValueError):
    """The requested motion profile cannot be realized."""


class BasisError(GpffError, ValueError):
    """Unknown or malformed basis function descriptor."""


class EmptyTrialError(GpffError, ValueError):
    """A trial of zero samples was requested."""
