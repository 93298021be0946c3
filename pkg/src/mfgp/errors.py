"""Exception hierarchy shared by every module."""


class MfgpError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(MfgpError, ValueError):
    pass


class NotPositiveDefinite(MfgpError, ArithmeticError):
    pass


class NonFiniteObjective(MfgpError, ArithmeticError):
    pass


class NonFiniteGradient(MfgpError, ArithmeticError):
    pass


class NegativeVariance(MfgpError, ArithmeticError):
    pass


class UnknownFidelity(MfgpError, ValueError):
    pass


class UnsupportedFidelityCount(MfgpError, ValueError):
    pass


class InsufficientData(MfgpError, ValueError):
    pass


class ConfigError(MfgpError, ValueError):
    pass


class DomainViolation(MfgpError, ValueError):
    pass


class UnknownLevel(MfgpError, ValueError):
    pass


class DegenerateTargets(MfgpError, ValueError):
    pass


class InfeasibleCardinality(MfgpError, ValueError):
    pass


class TooLarge(MfgpError, ValueError):
    pass


class DigestMismatch(MfgpError, ValueError):
    pass


class SchemaError(MfgpError, ValueError):
    """Malformed dataset or grid file; message carries the offending row."""
