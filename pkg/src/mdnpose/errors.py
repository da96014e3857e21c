"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3 and numeric aborts with 4.
"""


class MdnPoseError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MdnPoseError, ValueError):
    exit_code = 2


class DataError(MdnPoseError, ValueError):
    exit_code = 3


class DimensionError(DataError):
    """Operand shapes are incompatible."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProvenanceError(DataError):
    """Normalization statistics do not match the ones a model was trained with."""


class DegeneratePoseError(DataError):
    pass


class ProjectionError(DataError):
    def __init__(self, message, joints=()):
        super().__init__(message)
        self.joints = list(joints)


class MetricDomainError(DataError):
    pass


class FusionError(ConfigError):
    pass


class NumericError(MdnPoseError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DomainError(NumericError):
    """Input outside an operation's mathematical domain."""


class EmptyInputError(NumericError):
    pass


class ProbeError(NumericError):
    """A finite-difference probe produced a non-finite function value."""
