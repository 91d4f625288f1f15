"""Exception hierarchy shared across the package."""


class CanarytraceError(Exception):
    """Base class for all package errors."""


class TemplateError(CanarytraceError):
    """Malformed canary template pattern."""


class ParameterError(CanarytraceError):
    """Operation called with out-of-range parameters."""


class FormatError(CanarytraceError):
    """Malformed or inconsistent data: bad file content, vocab mismatch, bad schema."""


class AuthenticationError(CanarytraceError):
    """Request failed authentication (unknown authority or bad MAC)."""


class ConflictError(CanarytraceError):
    """Attempt to register an identifier that is already taken."""


class DegenerateDistributionError(CanarytraceError):
    """Normal approximation requested for a distribution with zero variance."""


class CalibrationError(CanarytraceError):
    """No threshold in [0, 1] can satisfy the requested false-positive target."""
