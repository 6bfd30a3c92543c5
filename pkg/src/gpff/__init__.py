"""Position-dependent feedforward: ILC with basis functions plus Gaussian-process regression."""

from .errors import (
    BasisError,
    ConditioningError,
    ConfigError,
    DomainError,
    EmptyTrialError,
    GpffError,
    NumericalError,
    SingularUpdateError,
    StabilityError,
    TrajectoryError,
)

__version__ = "0.1.0"
