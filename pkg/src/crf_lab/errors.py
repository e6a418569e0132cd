"""Exception hierarchy shared by all modules."""


class CRFError(Exception):
    """Base class for numerical failures in the lab."""


class GeometryError(CRFError):
    """Degenerate or non-finite metric handed to the curvature pipeline."""


class SolverError(CRFError):
    """Elliptic iteration failed to reach its tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NormalizationError(CRFError):
    """Yamabe-type normalization diverged or lost positivity."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FlowError(CRFError):
    """A flow step could not be accepted."""

    def __init__(self, message, t=None, drift=None):
        super().__init__(message)
        self.t = t
        self.drift = drift


class ConfigError(ValueError):
    """Experiment configuration is invalid."""
