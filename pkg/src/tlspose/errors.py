"""Exception hierarchy shared by the library and the command line."""


class TLSPoseError(Exception):
    """Base class for all errors raised by tlspose."""


class DegenerateGeometryError(TLSPoseError):
    """Geometry leaves the problem undefined (coincident points, angle at pi)."""


class DegenerateConfigurationError(TLSPoseError):
    """Rank-deficient feature configuration or design matrix."""


class IllConditionedSystemError(TLSPoseError):
    """Normal matrix is singular or not positive definite to working precision."""


class InvalidNoiseModelError(TLSPoseError):
    """A covariance block cannot be factored."""


class ScenarioFormatError(TLSPoseError, ValueError):
    """Scenario or measurement document is malformed."""
