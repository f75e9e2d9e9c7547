"""Exception types shared across the package."""


class SRSCNError(Exception):
    """Base class; ``kind`` is the short tag printed by the CLI."""

    kind = "error"


class ConfigurationError(SRSCNError, ValueError):
    kind = "configuration"


class FormatError(SRSCNError, ValueError):
    kind = "format"


class ShapeError(SRSCNError, ValueError):
    kind = "shape"


class NumericError(SRSCNError, ArithmeticError):
    kind = "numeric"


class TrainingError(SRSCNError, RuntimeError):
    kind = "training"


class UndefinedMetricError(SRSCNError, ValueError):
    kind = "undefined_metric"
