"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: parameter/usage problems -> 2,
data/format problems -> 3, infeasibility/constraint problems -> 4.
"""


class SplatSchedError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(SplatSchedError, ValueError):
    """An argument is outside its documented range or malformed."""


class ConfigurationError(SplatSchedError):
    """Inconsistent configuration, e.g. temporal culling without timestamps."""


class ConsistencyError(SplatSchedError):
    """Two inputs that must describe the same scene disagree."""


class ConstraintError(SplatSchedError):
    """A placement constraint (equal patches per GPU, divisibility) is violated."""


class InfeasiblePartitionError(SplatSchedError):
    """No balanced partition exists, e.g. a single vertex exceeds the cap."""


class DatasetFormatError(SplatSchedError):
    """Malformed dataset file.  Carries the byte offset of the problem."""

    def __init__(self, message, byte_offset=None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class DatasetVersionError(SplatSchedError):
    """Dataset file declares an unsupported version tag."""


class ComparisonError(SplatSchedError):
    """Two reports being compared were not produced from the same schedule."""


class InstanceTooLargeError(SplatSchedError):
    """Brute-force oracle guard tripped."""
