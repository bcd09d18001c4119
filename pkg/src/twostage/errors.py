"""Exception and warning types raised across the package."""


class TwoStageError(Exception):
    """Base class for all package errors."""


class InputError(TwoStageError, ValueError):
    """Malformed or out-of-range input."""


class SingularityError(TwoStageError):
    """A matrix sits outside the stable-rank region of the pseudoinverse."""


class EigengapError(TwoStageError):
    """The eigengap needed for a spectral projector is too small."""


class OutOfChartError(TwoStageError):
    """A descriptor lies outside the neighbourhood where the section is defined."""


class ModelError(TwoStageError):
    """Model parameters violate a structural assumption (e.g. a non-PSD covariance)."""


class FitError(TwoStageError):
    """Base class for estimation failures inside a replication."""


class NonConvergenceError(FitError):
    """No optimizer restart reached the gradient tolerance."""

    def __init__(self, message, grad_norms=()):
        super().__init__(message)
        self.grad_norms = tuple(grad_norms)


class NumericalError(FitError):
    """An iterative routine behaved in a way that is impossible in exact arithmetic."""


class SamplingError(TwoStageError):
    """A Monte-Carlo estimate failed a sanity check (e.g. lost PSD-ness)."""


class AssumptionViolation(TwoStageError):
    """A regularity assumption of the model fails at the true parameter."""


class ConfigError(TwoStageError):
    """Invalid experiment configuration; maps to CLI exit code 2."""


class DegenerateDesignWarning(UserWarning):
    """Empirical feature covariance has larger rank than its population counterpart."""


class GaugeWarning(UserWarning):
    """Permutation alignment to the reference is ambiguous."""
