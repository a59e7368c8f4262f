"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration/validation problems
exit with 1, numerical failures (relaxation, stability, statistics)
with 2, and I/O problems with 3.
"""


class JumphomError(Exception):
    """Base class for all package errors."""


class ConfigurationError(JumphomError):
    """Invalid specification, option, or parameter combination."""


class DomainError(JumphomError):
    """Evaluation outside the valid domain (time horizon, box support)."""


class DimensionError(JumphomError):
    """Mismatched grids, shapes, or sample-time layouts."""


class NumericalError(JumphomError):
    """Base class for failures of the numerical contracts."""


class RelaxationError(NumericalError):
    """Relaxation to a stationary solution did not meet its doubling tolerance.

    Carries the fitted decay rate and the window that the fit suggests
    would be needed, so callers can retry with a longer window.
    """

    def __init__(self, message, fitted_rate=None, suggested_window=None):
        super().__init__(message)
        self.fitted_rate = fitted_rate
        self.suggested_window = suggested_window


class InconsistencyError(NumericalError):
    """Internal cross-check failed (e.g. solvability compatibility integral)."""


class StatisticalError(NumericalError):
    """Statistical estimate failed its sanity contract (mixing fit, PSD-ness)."""
