"""Exception types shared across the package."""


class CPMError(Exception):
    """Base class for library errors."""


class ParameterError(CPMError, ValueError):
    """Invalid model or kernel parameter."""


class CapabilityError(CPMError):
    """The requested operation is not available for this model."""


class DataError(CPMError, ValueError):
    """Observations are malformed or non-finite."""


class DegenerateEstimateError(CPMError, ArithmeticError):
    """All importance weights vanished at some time step.

    Attributes
    ----------
    t : int
        Zero-based time index at which the weights degenerated.
    """

    def __init__(self, t, message=None):
        self.t = int(t)
        super().__init__(message or f"all weights are zero at t={self.t}")


class UndefinedIACTError(CPMError, ValueError):
    """IACT requested for a series with zero variance."""


class CalibrationRangeError(CPMError, RuntimeError):
    """Target correlation scale cannot be reached inside the search range."""


class ConfigError(CPMError, ValueError):
    """Experiment configuration failed validation.

    Attributes
    ----------
    path : str
        Dotted path of the offending field ("" for the document root).
    """

    def __init__(self, message, path=""):
        self.path = path
        loc = f" at '{path}'" if path else ""
        super().__init__(f"{message}{loc}")


class ChainAborted(CPMError, RuntimeError):
    """A trace sink failed; ``trace`` holds what was recorded so far."""

    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)
